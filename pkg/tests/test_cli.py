import hashlib
import json

import numpy as np
import pytest

from sihmm import storage
from sihmm.cli import grid_cells, main, selection_key
from sihmm.synth import SynthConfig, generate

SMALL = """
[synth]
total_points = 400
n_sequences = 4
seed = 2

[model]
K = 5
alpha = 2
gamma = 2

[svi]
passes = 3

[data]
heldout = 1
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(SMALL)
    return str(path)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(*argv):
    return main([str(a) for a in argv] + ["--quiet"])


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ValueError, match="svi.pases"):
            storage.parse_config("[svi]\npases = 3\n")

    def test_unknown_section(self):
        with pytest.raises(ValueError, match="section"):
            storage.parse_config("[fitting]\npasses = 3\n")

    def test_values_are_validated(self):
        with pytest.raises(ValueError):
            storage.parse_config("[model]\nK = 0\n")
        with pytest.raises(ValueError, match="cannot parse"):
            storage.parse_config("[svi]\npasses = many\n")

    def test_parses_sections(self):
        cfg = storage.parse_config(SMALL + "[grid]\nalpha = 1, 5\nK = 20, 30\nseeds = 3\n")
        assert cfg.hyper.K == 5 and cfg.svi.passes == 3 and cfg.synth.total_points == 400
        assert cfg.grid == {"alpha": [1.0, 5.0], "K": [20, 30]} and cfg.grid_seeds == 3
        assert len(grid_cells(cfg)) == 4

    def test_inline_comments(self):
        cfg = storage.parse_config("[model]\nK = 7   ; truncation\nmean = empirical # data mean\n")
        assert cfg.hyper.K == 7 and cfg.hyper.emission.mean is None

    def test_emission_keys(self):
        cfg = storage.parse_config("[model]\nfamily = niw\nmean = empirical\nshape = 5\n")
        assert cfg.hyper.emission.family == "niw" and cfg.hyper.emission.mean is None


class TestCsv:
    def test_round_trip_exact(self, tmp_path):
        ds = generate(SynthConfig(total_points=300, n_sequences=3, seed=1))
        storage.write_data(tmp_path / "d.csv", ds.observations)
        ids, seqs = storage.read_data(tmp_path / "d.csv")
        assert ids == [0, 1, 2]
        for a, b in zip(seqs, ds.observations):
            assert a.tobytes() == b.tobytes()

    def test_malformed_row_names_line(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("seq_id,t,y0\n0,0,1.0\n0,1,abc\n")
        with pytest.raises(ValueError, match=":3:"):
            storage.read_data(path)

    def test_out_of_order_time(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("seq_id,t,y0\n0,0,1.0\n0,2,1.0\n")
        with pytest.raises(ValueError, match="expected t=1"):
            storage.read_data(path)

    def test_model_round_trip(self, tmp_path):
        from conftest import random_state

        state = random_state(K=3, variant="feature-based", seed=0)
        storage.save_model(tmp_path / "m.json", state, [0, 1], [2])
        back, train, held = storage.load_model(tmp_path / "m.json")
        assert train == [0, 1] and held == [2]
        assert back.trans_conc.tobytes() == state.trans_conc.tobytes()
        assert back.theta.tobytes() == state.theta.tobytes()
        assert back.spec.hyper == state.spec.hyper


class TestCommands:
    def test_synth_rows_and_hazard_zero(self, tmp_path):
        cfg = tmp_path / "h0.ini"
        cfg.write_text("[synth]\nhazard = 0\n")
        assert run("synth", "--config", cfg, "--out", tmp_path / "s") == 0
        truth = storage.read_truth(tmp_path / "s" / "truth.csv")
        assert len(truth) == 20 and sum(len(v[0]) for v in truth.values()) == 5000
        for _, flags, _ in truth.values():
            assert flags[0] == 1 and flags[1:].sum() == 0

    def test_pipeline(self, tmp_path, config):
        assert run("synth", "--config", config, "--out", tmp_path / "s") == 0
        data, truth = tmp_path / "s" / "data.csv", tmp_path / "s" / "truth.csv"
        assert run("fit", data, "--config", config, "--out", tmp_path / "f") == 0
        lines = (tmp_path / "f" / "trace.jsonl").read_text().splitlines()
        assert len(lines) == 3 * 2  # 3 passes over 3 training sequences in batches of 2
        assert "wall_time" not in json.loads(lines[0])

        assert run("eval", tmp_path / "f" / "model.json", data, "--truth", truth, "--out", tmp_path / "e") == 0
        metrics = json.loads((tmp_path / "e" / "metrics.json").read_text())
        for key in ("hamming", "predictive_ll", "boundary_f1", "labeling_error", "seg_prob"):
            assert key in metrics
        assert metrics["predictive_ll_scope"] == "heldout"

        assert run("eval", tmp_path / "f" / "model.json", data, "--out", tmp_path / "u") == 0
        unsupervised = json.loads((tmp_path / "u" / "metrics.json").read_text())
        assert "hamming" not in unsupervised and "seg_prob" in unsupervised

    def test_zero_passes_gives_initial_state(self, tmp_path, config):
        from sihmm.model import DataSummary, init_global
        from sihmm.svi import SviConfig

        run("synth", "--config", config, "--out", tmp_path / "s")
        zero = tmp_path / "zero.ini"
        zero.write_text(SMALL.replace("passes = 3", "passes = 0"))
        assert run("fit", tmp_path / "s" / "data.csv", "--config", zero, "--out", tmp_path / "f") == 0
        state, _, _ = storage.load_model(tmp_path / "f" / "model.json")
        cfg = storage.load_config(zero)
        _, seqs = storage.read_data(tmp_path / "s" / "data.csv")
        seed = int(np.random.default_rng(SviConfig().seed).integers(2**63))
        expect = init_global(cfg.hyper, DataSummary.from_sequences(seqs[:3]), seed)
        assert state.emission_eta.tobytes() == expect.emission_eta.tobytes()

    def test_sweep_selects_argmax(self, tmp_path, config):
        run("synth", "--config", config, "--out", tmp_path / "s")
        grid = tmp_path / "g.ini"
        grid.write_text(SMALL + "[grid]\nalpha = 1, 4\nseeds = 2\n")
        data, truth = tmp_path / "s" / "data.csv", tmp_path / "s" / "truth.csv"
        assert run("sweep", data, "--truth", truth, "--config", grid, "--out", tmp_path / "w") == 0
        out = json.loads((tmp_path / "w" / "sweep.json").read_text())
        assert len(out["cells"]) == 4
        vlbs = [c["vlb"] for c in out["cells"]]
        assert out["best"]["vlb"] == max(vlbs)
        assert all("hamming" in c for c in out["cells"])
        assert (tmp_path / "w" / "model.json").exists()

    def test_single_cell_sweep(self, tmp_path, config):
        run("synth", "--config", config, "--out", tmp_path / "s")
        assert run("sweep", tmp_path / "s" / "data.csv", "--config", config, "--out", tmp_path / "w") == 0
        out = json.loads((tmp_path / "w" / "sweep.json").read_text())
        assert out["selected"] == 0

    def test_tie_break(self):
        def res(K, alpha, rep):
            return {"vlb": -1.0, "rep": rep,
                    "hyper": {"K": K, "alpha": alpha, "gamma": 1.0, "emission": {"shape": 1.0, "scale": 1.0}}}

        ranked = sorted([res(30, 1.0, 0), res(20, 5.0, 1), res(20, 5.0, 0), res(20, 1.0, 1)], key=selection_key)
        assert [(r["hyper"]["K"], r["hyper"]["alpha"], r["rep"]) for r in ranked] == [
            (20, 1.0, 1), (20, 5.0, 0), (20, 5.0, 1), (30, 1.0, 0)]

    def test_fit_is_byte_reproducible(self, tmp_path, config):
        run("synth", "--config", config, "--out", tmp_path / "s")
        for name in ("a", "b"):
            run("fit", tmp_path / "s" / "data.csv", "--config", config, "--seed", "4", "--out", tmp_path / name)
        for f in ("model.json", "trace.jsonl"):
            assert digest(tmp_path / "a" / f) == digest(tmp_path / "b" / f)

    def test_exit_codes(self, tmp_path, config):
        assert run("fit", tmp_path / "missing.csv", "--out", tmp_path) == 2
        bad = tmp_path / "bad.ini"
        bad.write_text("[svi]\nspeed = 3\n")
        assert run("synth", "--config", bad, "--out", tmp_path) == 1
        assert run("synth", "--config", tmp_path / "nope.ini", "--out", tmp_path) == 2
        rows = tmp_path / "rows.csv"
        rows.write_text("seq_id,t,y0\n0,0,x\n")
        assert run("fit", rows, "--out", tmp_path) == 1
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1
