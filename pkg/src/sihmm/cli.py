"""Command-line entry point: ``sihmm synth|fit|eval|sweep``."""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import storage
from .evaluation import (
    block_structure,
    boundary_f1,
    boundary_starts,
    decode_paths,
    label_paths,
    normalized_hamming,
    predictive_loglik,
)
from .model import mean_transition
from .storage import StorageError
from .svi import elbo_estimate, fit
from .synth import generate

log = logging.getLogger("sihmm")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise StorageError(f"no such file: {p}")


def _split(ids, sequences, heldout):
    if heldout >= len(sequences):
        raise ValueError(f"cannot hold out {heldout} of {len(sequences)} sequences")
    cut = len(sequences) - heldout
    return ids[:cut], sequences[:cut], ids[cut:], sequences[cut:]


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def cmd_synth(args, cfg):
    c = cfg.synth if args.seed is None else dataclasses.replace(cfg.synth, seed=args.seed)
    ds = generate(c)
    out = Path(args.out)
    storage.write_data(out / "data.csv", ds.observations)
    storage.write_truth(out / "truth.csv", ds)
    storage.write_json(out / "synth.json", {
        "config": dataclasses.asdict(c),
        "transitions": ds.draws.transitions.tolist(),
        "means": ds.draws.means.tolist(),
        "variances": ds.draws.variances.tolist(),
    })
    log.info("wrote %d points in %d sequences to %s", c.total_points, c.n_sequences, out)


# --------------------------------------------------------------------------
# fit
# --------------------------------------------------------------------------

def cmd_fit(args, cfg):
    ids, seqs = storage.read_data(args.data)
    svi = cfg.svi if args.seed is None else dataclasses.replace(cfg.svi, seed=args.seed)
    train_ids, train, held_ids, _ = _split(ids, seqs, cfg.heldout)

    def progress(rec, _state):
        if rec.iteration % 100 == 0:
            log.info("update %d  rho %.4f  elbo %.3f", rec.iteration, rec.rho, rec.elbo)

    trace = fit(train, cfg.hyper, svi, callback=progress)
    out = Path(args.out)
    storage.save_model(out / "model.json", trace.state, train_ids, held_ids)
    storage.write_jsonl(out / "trace.jsonl", [r.as_dict() for r in trace.records])
    storage.write_json(out / "fit_meta.json", {
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "wall_time": [r.wall_time for r in trace.records],
    })
    log.info("fitted %d updates; model written to %s", len(trace.records), out / "model.json")


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def score(state, ids, seqs, truth=None, heldout_ids=(), threshold=0.5, n_labels=None, window=5, seed=0):
    """Metrics for a fitted state on a dataset; truth-dependent keys only when ``truth`` is given."""
    paths, segs = decode_paths(state, seqs)
    by_id = dict(zip(ids, seqs))
    held = [by_id[i] for i in heldout_ids if i in by_id]
    metrics = {
        "predictive_ll": predictive_loglik(state, held if held else seqs),
        "predictive_ll_scope": "heldout" if held else "all",
        "seg_prob": {str(i): s.tolist() for i, s in zip(ids, segs)},
    }
    if truth is None:
        return metrics
    missing = [i for i in ids if i not in truth]
    if missing:
        raise ValueError(f"truth has no rows for sequence ids {missing[:5]}")
    for i, Y in zip(ids, seqs):
        if len(truth[i][0]) != len(Y):
            raise ValueError(f"truth length for sequence {i} does not match the data")
    true_states = [truth[i][0] for i in ids]
    true_regime = [truth[i][2] for i in ids]
    metrics["hamming"] = normalized_hamming(np.concatenate(true_states), np.concatenate(paths))

    true_b, inf_b = [], []
    offset = 0
    for i, seg in zip(ids, segs):
        flags = truth[i][1]
        true_b += [offset + t for t in np.flatnonzero(flags) if t > 0]
        inf_b += [offset + t for t in boundary_starts(seg, threshold)]
        offset += len(seg) + window + 1  # keeps matches from crossing sequences
    p, r, f = boundary_f1(true_b, inf_b, window)
    metrics["boundary_f1"] = {"precision": p, "recall": r, "f1": f, "window": window}

    k = n_labels if n_labels is not None else len(np.unique(np.concatenate(true_regime)))
    _, err = label_paths(paths, segs, state.K, k, true_regime, threshold, seed)
    metrics["labeling_error"] = err

    within, cross = block_structure(mean_transition(state)[0], np.concatenate(paths),
                                    np.concatenate(true_states), np.concatenate(true_regime))
    metrics["block_structure"] = {"within": within, "cross": cross,
                                  "ratio": within / cross if cross > 0 else float("inf")}
    return metrics


def cmd_eval(args, cfg):
    _require(args.model, args.data, args.truth)
    state, _, heldout_ids = storage.load_model(args.model)
    ids, seqs = storage.read_data(args.data)
    if seqs[0].shape[1] != state.spec.dim:
        raise ValueError(f"data dimension {seqs[0].shape[1]} does not match model dimension {state.spec.dim}")
    truth = storage.read_truth(args.truth) if args.truth else None
    metrics = score(state, ids, seqs, truth, heldout_ids, args.threshold, args.n_labels, args.window,
                    0 if args.seed is None else args.seed)
    storage.write_json(Path(args.out) / "metrics.json", metrics)
    if "hamming" in metrics:
        log.info("hamming %.4f  predictive ll %.2f", metrics["hamming"], metrics["predictive_ll"])


# --------------------------------------------------------------------------
# sweep
# --------------------------------------------------------------------------

def grid_cells(cfg):
    """Hyperparameter cells of the grid in a fixed order."""
    base = cfg.hyper
    grid = cfg.grid
    keys = ("alpha", "gamma", "K", "shape", "scale")
    values = [grid.get(k, [getattr(base.emission if k in ("shape", "scale") else base, k)]) for k in keys]
    cells = []
    for combo in itertools.product(*values):
        c = dict(zip(keys, combo))
        emission = dataclasses.replace(base.emission, shape=c["shape"], scale=c["scale"])
        cells.append(dataclasses.replace(base, alpha=c["alpha"], gamma=c["gamma"], K=c["K"], emission=emission))
    return cells


def cell_seed(master, cell, rep):
    return int(np.random.SeedSequence(master, spawn_key=(cell, rep)).generate_state(1, dtype=np.uint64)[0])


def _run_cell(job):
    cell, rep, hyper, svi, train, ids, seqs, truth, held_ids = job
    start = time.perf_counter()
    out = {"cell": cell, "rep": rep, "seed": svi.seed, "hyper": storage.hyper_to_dict(hyper)}
    try:
        state = fit(train, hyper, svi).state
        out["vlb"] = float(elbo_estimate(state, train))
        if not np.isfinite(out["vlb"]):
            raise ValueError("final VLB is not finite")
        by_id = dict(zip(ids, seqs))
        out["predictive_ll"] = predictive_loglik(state, [by_id[i] for i in held_ids]) if held_ids else None
        if truth is not None:
            paths, _ = decode_paths(state, seqs)
            out["hamming"] = normalized_hamming(np.concatenate([truth[i][0] for i in ids]), np.concatenate(paths))
        out["model"] = storage.state_to_dict(state)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as err:
        out["error"] = f"{type(err).__name__}: {err}"
    return out, time.perf_counter() - start


def selection_key(result):
    """Highest VLB first; ties go to the lower K, then the smaller hyperparameters."""
    h = result["hyper"]
    e = h["emission"]
    return (-result["vlb"], h["K"], h["alpha"], h["gamma"], e["shape"], e["scale"], result["rep"])


def sweep(ids, seqs, cfg, truth=None, master_seed=0, jobs=1):
    """Fit every cell and seed; return (results, runtimes, index of the selected result)."""
    train_ids, train, held_ids, _ = _split(ids, seqs, cfg.heldout)
    cells = grid_cells(cfg)
    work = []
    for ci, hyper in enumerate(cells):
        for rep in range(cfg.grid_seeds):
            svi = dataclasses.replace(cfg.svi, seed=cell_seed(master_seed, ci, rep))
            work.append((ci, rep, hyper, svi, train, ids, seqs, truth, held_ids))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(_run_cell, work))
    else:
        done = []
        for job in work:
            done.append(_run_cell(job))
            res = done[-1][0]
            log.info("cell %d rep %d: %s", res["cell"], res["rep"],
                     res.get("error") or f"vlb {res['vlb']:.2f}")
    results = [r for r, _ in done]
    runtimes = [t for _, t in done]
    ok = [i for i, r in enumerate(results) if "error" not in r]
    if not ok:
        raise ValueError("every sweep cell failed")
    best = min(ok, key=lambda i: selection_key(results[i]))
    return results, runtimes, best, (train_ids, held_ids)


def cmd_sweep(args, cfg):
    _require(args.data, args.truth)
    ids, seqs = storage.read_data(args.data)
    truth = storage.read_truth(args.truth) if args.truth else None
    if args.jobs < 1:
        raise ValueError("--jobs must be >= 1")
    results, runtimes, best, (train_ids, held_ids) = sweep(
        ids, seqs, cfg, truth, 0 if args.seed is None else args.seed, args.jobs)
    out = Path(args.out)
    best_state, _, _ = storage.state_from_dict(results[best]["model"])
    storage.save_model(out / "model.json", best_state, train_ids, held_ids)
    summary = [{k: v for k, v in r.items() if k != "model"} for r in results]
    storage.write_json(out / "sweep.json", {"cells": summary, "selected": best, "best": summary[best]})
    storage.write_json(out / "sweep_meta.json", {"runtime": runtimes, "jobs": args.jobs})
    log.info("selected cell %d rep %d (vlb %.2f)", results[best]["cell"], results[best]["rep"], results[best]["vlb"])


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="sihmm", description="Segmented infinite HMM fitted by stochastic variational inference.")
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="INI file with [model], [svi], [synth], [data], [grid] sections")
    shared.add_argument("--seed", type=int, help="overrides the seed in the config")
    shared.add_argument("--out", default=".", help="output directory")
    shared.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("synth", parents=[shared], help="generate the synthetic multi-regime corpus")

    p = sub.add_parser("fit", parents=[shared], help="fit a model to a data CSV")
    p.add_argument("data")

    p = sub.add_parser("eval", parents=[shared], help="score a fitted model")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("--truth")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--n-labels", type=int)
    p.add_argument("--window", type=int, default=5)

    p = sub.add_parser("sweep", parents=[shared], help="grid search with selection by the final VLB")
    p.add_argument("data")
    p.add_argument("--truth")
    p.add_argument("--jobs", type=int, default=1)
    return parser


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        _require(args.config)
        cfg = storage.load_config(args.config)
        COMMANDS[args.command](args, cfg)
    except StorageError as err:
        print(f"sihmm: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        print(f"sihmm: {err}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
