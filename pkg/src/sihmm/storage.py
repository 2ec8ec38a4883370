"""Files: data and truth CSVs, INI-style run configs and the model JSON."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
from pathlib import Path

import numpy as np

from .model import EmissionPrior, GlobalState, Hyperparams, ModelSpec
from .svi import SviConfig
from .synth import SynthConfig

MODEL_FORMAT = "sihmm-model"
MODEL_VERSION = 1


class StorageError(Exception):
    """A file could not be read or written; the message names the path."""


def _fmt(x):
    return format(float(x), ".17g")


def _open_write(path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, "w", encoding="utf-8", newline="")
    except OSError as err:
        raise StorageError(f"cannot write {path}: {err.strerror}") from err


def _open_read(path):
    path = Path(path)
    try:
        return open(path, encoding="utf-8", newline="")
    except OSError as err:
        raise StorageError(f"cannot read {path}: {err.strerror}") from err


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

def write_data(path, sequences, ids=None):
    """Write observations as ``seq_id,t,y0,...`` rows with 17 significant digits."""
    sequences = [np.asarray(Y, dtype=float).reshape(len(Y), -1) for Y in sequences]
    ids = list(range(len(sequences))) if ids is None else list(ids)
    d = sequences[0].shape[1]
    with _open_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seq_id", "t"] + [f"y{j}" for j in range(d)])
        for sid, Y in zip(ids, sequences):
            for t, row in enumerate(Y):
                w.writerow([sid, t] + [_fmt(v) for v in row])


def write_truth(path, dataset, ids=None):
    ids = list(range(len(dataset.sequences))) if ids is None else list(ids)
    with _open_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seq_id", "t", "state", "segment_start", "regime"])
        for sid, seq in zip(ids, dataset.sequences):
            for t in range(len(seq.states)):
                w.writerow([sid, t, int(seq.states[t]), int(seq.segment_start[t]), int(seq.regime[t])])


def _read_rows(path, expect_prefix):
    with _open_read(path) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: file is empty") from None
        if header[:len(expect_prefix)] != expect_prefix:
            raise ValueError(f"{path}: header must start with {','.join(expect_prefix)}, got {','.join(header)}")
        rows = []
        for line, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            rows.append((line, row))
    return header, rows


def _group(path, rows, parse):
    """Collect rows into per-sequence lists, checking that t counts up from 0."""
    order = []
    groups = {}
    for line, row in rows:
        try:
            sid, t = int(row[0]), int(row[1])
            values = parse(row[2:])
        except ValueError as err:
            raise ValueError(f"{path}:{line}: {err}") from None
        if sid not in groups:
            order.append(sid)
            groups[sid] = []
        if t != len(groups[sid]):
            raise ValueError(f"{path}:{line}: sequence {sid} expected t={len(groups[sid])}, got {t}")
        groups[sid].append(values)
    return order, groups


def _floats(fields):
    out = [float(v) for v in fields]
    if not all(np.isfinite(out)):
        raise ValueError("observation is not finite")
    return out


def read_data(path):
    """Return ``(ids, sequences)`` with each sequence a ``(T, d)`` array."""
    header, rows = _read_rows(path, ["seq_id", "t"])
    if len(header) < 3:
        raise ValueError(f"{path}: no observation columns")
    order, groups = _group(path, rows, _floats)
    if not order:
        raise ValueError(f"{path}: no data rows")
    return order, [np.array(groups[sid], dtype=float) for sid in order]


def read_truth(path):
    """Return ``{seq_id: (states, segment_start, regime)}``."""
    _, rows = _read_rows(path, ["seq_id", "t", "state", "segment_start", "regime"])
    order, groups = _group(path, rows, lambda f: [int(v) for v in f])
    out = {}
    for sid in order:
        arr = np.array(groups[sid], dtype=int)
        out[sid] = (arr[:, 0], arr[:, 1], arr[:, 2])
    return out


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------

GRID_KEYS = {"alpha": float, "gamma": float, "K": int, "shape": float, "scale": float}
EMISSION_KEYS = {"family", "mean", "kappa0", "shape", "scale"}


def _convert(text, kind, key):
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "float | None":
            return None if text.lower() in ("none", "") else float(text)
        return text
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {text!r} as {kind}") from None


def _section(parser, name, fields, extra=()):
    if not parser.has_section(name):
        return {}
    out = {}
    known = {f.name: f.type for f in fields}
    for key, text in parser.items(name):
        if key in extra:
            out[key] = text
        elif key in known:
            out[key] = _convert(text, known[key], f"{name}.{key}")
        else:
            raise ValueError(f"unknown config key {name}.{key}")
    return out


@dataclasses.dataclass
class RunConfig:
    hyper: Hyperparams = dataclasses.field(default_factory=Hyperparams)
    svi: SviConfig = dataclasses.field(default_factory=SviConfig)
    synth: SynthConfig = dataclasses.field(default_factory=SynthConfig)
    heldout: int = 0
    grid: dict = dataclasses.field(default_factory=dict)
    grid_seeds: int = 1


def _grid_list(text, kind, key):
    items = [v for v in text.split(",") if v.strip()]
    if not items:
        raise ValueError(f"grid key {key!r} is empty")
    try:
        return [kind(v.strip()) for v in items]
    except ValueError:
        raise ValueError(f"grid key {key!r}: cannot parse {text!r}") from None


def parse_config(text, source="<config>"):
    """Parse INI text with [model], [svi], [synth], [data] and [grid] sections."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # keys are case sensitive (K)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as err:
        raise ValueError(f"{source}: {err}") from None
    for name in parser.sections():
        if name not in ("model", "svi", "synth", "data", "grid"):
            raise ValueError(f"unknown config section [{name}]")

    hyper_fields = [f for f in dataclasses.fields(Hyperparams) if f.name != "emission"]
    model = _section(parser, "model", hyper_fields, extra=EMISSION_KEYS)
    emission = {}
    for key in EMISSION_KEYS & set(model):
        text_value = model.pop(key).strip()
        if key == "family":
            emission[key] = text_value
        elif key == "mean":
            emission[key] = None if text_value.lower() == "empirical" else _convert(text_value, "float", "model.mean")
        else:
            emission[key] = _convert(text_value, "float", f"model.{key}")
    hyper = Hyperparams(emission=EmissionPrior(**emission), **model)
    svi = SviConfig(**_section(parser, "svi", dataclasses.fields(SviConfig)))
    synth = SynthConfig(**_section(parser, "synth", dataclasses.fields(SynthConfig)))

    heldout = 0
    if parser.has_section("data"):
        for key, value in parser.items("data"):
            if key != "heldout":
                raise ValueError(f"unknown config key data.{key}")
            heldout = _convert(value, "int", "data.heldout")
            if heldout < 0:
                raise ValueError("data.heldout must be nonnegative")

    grid = {}
    seeds = 1
    if parser.has_section("grid"):
        for key, value in parser.items("grid"):
            if key == "seeds":
                seeds = _convert(value, "int", "grid.seeds")
                if seeds < 1:
                    raise ValueError("grid.seeds must be >= 1")
            elif key in GRID_KEYS:
                grid[key] = _grid_list(value, GRID_KEYS[key], key)
            else:
                raise ValueError(f"unknown config key grid.{key}")
    return RunConfig(hyper, svi, synth, heldout, grid, seeds)


def load_config(path):
    if path is None:
        return RunConfig()
    with _open_read(path) as fh:
        text = fh.read()
    return parse_config(text, str(path))


# --------------------------------------------------------------------------
# model JSON
# --------------------------------------------------------------------------

def hyper_to_dict(h):
    out = dataclasses.asdict(h)
    out["K"] = int(out["K"])
    return out


def hyper_from_dict(d):
    d = dict(d)
    return Hyperparams(emission=EmissionPrior(**d.pop("emission")), **d)


def state_to_dict(state, train_ids=(), heldout_ids=()):
    spec = state.spec
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "hyper": hyper_to_dict(spec.hyper),
        "dim": spec.dim,
        "K": state.K,
        "n_params": spec.family.n_params,
        "n_features": spec.n_features,
        "train_ids": [int(i) for i in train_ids],
        "heldout_ids": [int(i) for i in heldout_ids],
        "emission_prior": spec.emission_prior.tolist(),
        "beta": state.beta.tolist(),
        "trans_conc": state.trans_conc.tolist(),
        "init_conc": state.init_conc.tolist(),
        "emission_eta": state.emission_eta.tolist(),
        "omega": state.omega.tolist(),
        "theta": state.theta.tolist(),
    }


def state_from_dict(d):
    if d.get("format") != MODEL_FORMAT:
        raise ValueError("not a model file")
    if d.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {d.get('version')!r}")
    hyper = hyper_from_dict(d["hyper"])
    spec = ModelSpec(hyper=hyper, dim=int(d["dim"]), emission_prior=np.array(d["emission_prior"], dtype=float))
    arr = {k: np.array(d[k], dtype=float) for k in ("beta", "trans_conc", "init_conc", "emission_eta", "omega", "theta")}
    arr["emission_eta"] = arr["emission_eta"].reshape(spec.K, spec.family.n_params)
    arr["theta"] = arr["theta"].reshape(spec.n_features)
    state = GlobalState(spec=spec, **arr)
    return state, d.get("train_ids", []), d.get("heldout_ids", [])


def write_json(path, obj):
    with _open_write(path) as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with _open_read(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as err:
            raise ValueError(f"{path}: invalid JSON ({err})") from None


def save_model(path, state, train_ids=(), heldout_ids=()):
    write_json(path, state_to_dict(state, train_ids, heldout_ids))


def load_model(path):
    return state_from_dict(read_json(path))


def write_jsonl(path, records):
    with _open_write(path) as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")
