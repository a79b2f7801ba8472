import csv
import json
import os
import time

import numpy as np
import pytest

from branchvi import checks, gaussmath
from branchvi.checkpoint import load_tensors
from branchvi.cli import load_checkpoint, main, parse_config_file
from branchvi.data import load_dataset
from branchvi.families import BranchParams, JointFamily


def _run(*argv):
    return main(list(argv))


def _read_trace(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestGenerate:
    def test_synthetic_outputs(self, tmp_path):
        out = tmp_path / "gen"
        rc = _run("generate", "--model", "synthetic", "--dim", "2", "--branches", "4",
                  "--obs", "6", "--seed", "11", "--out-dir", str(out))
        assert rc == 0
        data = load_dataset(str(out / "data"))
        assert data.n_branches == 4 and data.n_obs == 24
        oracle_text = (out / "oracle.txt").read_text()
        assert oracle_text.startswith("log_marginal = ")
        latents = load_tensors(out / "latents.nt")
        assert latents["theta"].shape == (2,)
        assert latents["z"].shape == (4, 2)
        manifest = (out / "manifest.txt").read_text()
        assert "command = generate" in manifest
        assert "seed = 11" in manifest
        assert "sha256.data.bin = " in manifest

    def test_seed_reproducibility_bitwise(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            _run("generate", "--model", "synthetic", "--dim", "1", "--branches", "3",
                 "--obs", "5", "--seed", "7", "--out-dir", str(out))
        assert (a / "data.bin").read_bytes() == (b / "data.bin").read_bytes()
        assert (a / "latents.nt").read_bytes() == (b / "latents.nt").read_bytes()

    def test_zero_branches_rejected(self, tmp_path):
        rc = _run("generate", "--model", "synthetic", "--dim", "1", "--branches", "0",
                  "--obs", "5", "--out-dir", str(tmp_path / "x"))
        assert rc != 0

    def test_split_outputs(self, tmp_path):
        out = tmp_path / "gen"
        _run("generate", "--model", "preference", "--dim", "2", "--branches", "3",
             "--obs", "10", "--seed", "3", "--test-fraction", "0.1",
             "--out-dir", str(out))
        train = load_dataset(str(out / "data_train"))
        test = load_dataset(str(out / "data_test"))
        assert train.n_branches == test.n_branches == 3
        assert all(b.n == 1 for b in test.branches)
        assert not (out / "oracle.txt").exists()


class TestTrainEval:
    @pytest.fixture()
    def generated(self, tmp_path):
        out = tmp_path / "gen"
        _run("generate", "--model", "synthetic", "--dim", "1", "--branches", "4",
             "--obs", "6", "--seed", "5", "--out-dir", str(out))
        return out

    def test_train_writes_trace_checkpoint_manifest(self, generated, tmp_path):
        run_dir = tmp_path / "run"
        rc = _run("train", "--model", "synthetic", "--family", "branch",
                  "--structure", "dense", "--dim", "1",
                  "--data", str(generated / "data"), "--iters", "120",
                  "--lr", "0.01", "--trace-every", "40", "--seed", "5",
                  "--out-dir", str(run_dir))
        assert rc == 0
        rows = _read_trace(run_dir / "trace.csv")
        assert list(rows[0].keys()) == ["iter", "wall_seconds", "lr", "elbo", "ema_elbo"]
        assert [int(r["iter"]) for r in rows] == [0, 40, 80, 119]
        params, it, ema, adam = load_checkpoint(run_dir / "checkpoint.nt")
        assert isinstance(params, BranchParams) and it == 120
        assert adam is not None and adam.t == 120

    def test_same_seed_trace_identical(self, generated, tmp_path):
        traces = []
        for name in ("r1", "r2"):
            run_dir = tmp_path / name
            _run("train", "--model", "synthetic", "--family", "branch",
                 "--structure", "diag", "--dim", "1",
                 "--data", str(generated / "data"), "--iters", "60",
                 "--trace-every", "20", "--seed", "9", "--out-dir", str(run_dir))
            rows = _read_trace(run_dir / "trace.csv")
            traces.append([(r["iter"], r["lr"], r["elbo"], r["ema_elbo"]) for r in rows])
        assert traces[0] == traces[1]

    def test_resume_reproduces_trace(self, generated, tmp_path):
        full_dir = tmp_path / "full"
        _run("train", "--model", "synthetic", "--family", "branch",
             "--structure", "dense", "--dim", "1", "--data", str(generated / "data"),
             "--iters", "100", "--trace-every", "25", "--seed", "2",
             "--out-dir", str(full_dir))
        part_dir = tmp_path / "part"
        _run("train", "--model", "synthetic", "--family", "branch",
             "--structure", "dense", "--dim", "1", "--data", str(generated / "data"),
             "--iters", "50", "--trace-every", "25", "--seed", "2",
             "--out-dir", str(part_dir))
        _run("train", "--model", "synthetic", "--family", "branch",
             "--structure", "dense", "--dim", "1", "--data", str(generated / "data"),
             "--iters", "100", "--trace-every", "25", "--seed", "2",
             "--out-dir", str(part_dir), "--resume", str(part_dir / "checkpoint.nt"))
        full_rows = {r["iter"]: r for r in _read_trace(full_dir / "trace.csv")}
        part_rows = {r["iter"]: r for r in _read_trace(part_dir / "trace.csv")}
        shared = set(full_rows) & set(part_rows)
        assert {"0", "25", "50", "75", "99"} <= shared
        for it in shared:
            assert float(part_rows[it]["elbo"]) == pytest.approx(
                float(full_rows[it]["elbo"]), abs=1e-9)
            assert float(part_rows[it]["ema_elbo"]) == pytest.approx(
                float(full_rows[it]["ema_elbo"]), abs=1e-9)

    def test_eval_writes_reports(self, generated, tmp_path):
        run_dir = tmp_path / "run"
        _run("train", "--model", "synthetic", "--family", "branch",
             "--structure", "dense", "--dim", "1", "--data", str(generated / "data"),
             "--iters", "80", "--seed", "5", "--out-dir", str(run_dir))
        eval_dir = tmp_path / "eval"
        rc = _run("eval", "--model", "synthetic", "--dim", "1",
                  "--data", str(generated / "data"),
                  "--checkpoint", str(run_dir / "checkpoint.nt"),
                  "--k-samples", "50", "--seed", "5", "--out-dir", str(eval_dir))
        assert rc == 0
        blob = json.loads((eval_dir / "report.json").read_text())
        assert blob["k"] == 50
        assert blob["train_elbo"] <= blob["train_ll"] + 1e-12

    def test_eval_missing_checkpoint_errors(self, generated, tmp_path):
        rc = _run("eval", "--model", "synthetic", "--dim", "1",
                  "--data", str(generated / "data"),
                  "--checkpoint", str(tmp_path / "nope.nt"),
                  "--out-dir", str(tmp_path / "e"))
        assert rc != 0

    def test_joint_rejects_subsampling(self, generated, tmp_path):
        rc = _run("train", "--model", "synthetic", "--family", "joint",
                  "--structure", "dense", "--dim", "1",
                  "--data", str(generated / "data"), "--iters", "10",
                  "--batch-size", "2", "--branches", "4",
                  "--out-dir", str(tmp_path / "j"))
        assert rc != 0

    def test_amortized_training_runs(self, generated, tmp_path):
        run_dir = tmp_path / "am"
        rc = _run("train", "--model", "synthetic", "--family", "amortized",
                  "--structure", "dense", "--dim", "1",
                  "--data", str(generated / "data"), "--iters", "30",
                  "--batch-size", "2", "--seed", "5", "--out-dir", str(run_dir))
        assert rc == 0
        params, _, _, _ = load_checkpoint(run_dir / "checkpoint.nt")
        from branchvi.amortize import AmortParams

        assert isinstance(params, AmortParams)


class TestConvert:
    def test_convert_then_warm_start(self, tmp_path):
        gen_dir = tmp_path / "gen"
        _run("generate", "--model", "synthetic", "--dim", "1", "--branches", "3",
             "--obs", "4", "--seed", "6", "--out-dir", str(gen_dir))
        joint_dir = tmp_path / "joint"
        _run("train", "--model", "synthetic", "--family", "joint",
             "--structure", "dense", "--dim", "1", "--data", str(gen_dir / "data"),
             "--iters", "60", "--seed", "6", "--out-dir", str(joint_dir))
        conv_dir = tmp_path / "conv"
        rc = _run("convert", "--checkpoint", str(joint_dir / "checkpoint.nt"),
                  "--out-dir", str(conv_dir), "--seed", "6")
        assert rc == 0
        branch, it, _, _ = load_checkpoint(conv_dir / "checkpoint_branch.nt")
        assert isinstance(branch, BranchParams) and it == 0
        warm_dir = tmp_path / "warm"
        rc = _run("train", "--model", "synthetic", "--family", "branch",
                  "--structure", "dense", "--dim", "1", "--data", str(gen_dir / "data"),
                  "--iters", "20", "--seed", "7",
                  "--resume", str(conv_dir / "checkpoint_branch.nt"),
                  "--out-dir", str(warm_dir))
        assert rc == 0

    def test_identity_joint_converts_to_zero_A(self, tmp_path):
        from branchvi.cli import save_checkpoint
        from branchvi.families import init_joint, joint_to_branch

        fam = init_joint("dense", 1, 1, 2)
        path = tmp_path / "joint.nt"
        save_checkpoint(str(path), fam)
        rc = _run("convert", "--checkpoint", str(path), "--out-dir", str(tmp_path))
        assert rc == 0
        branch, _, _, _ = load_checkpoint(tmp_path / "checkpoint_branch.nt")
        for w in branch.w:
            assert np.allclose(w.A, 0.0, atol=1e-15)

    def test_convert_rejects_branch_checkpoint(self, tmp_path):
        from branchvi.cli import save_checkpoint
        from branchvi.families import init_branch

        path = tmp_path / "branch.nt"
        save_checkpoint(str(path), init_branch("dense", 1, 1, 2))
        rc = _run("convert", "--checkpoint", str(path), "--out-dir", str(tmp_path))
        assert rc != 0


class TestConfigFile:
    def test_file_then_flag_precedence(self, tmp_path):
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text("# comment\nmodel = synthetic\ndim = 3\nseed = 41\n"
                            "lr = 0.005\n")
        values = parse_config_file(str(cfg_path))
        assert values == {"model": "synthetic", "dim": 3, "seed": 41, "lr": 0.005}

    def test_unknown_key_rejected(self, tmp_path):
        cfg_path = tmp_path / "bad.cfg"
        cfg_path.write_text("nonsense = 1\n")
        with pytest.raises(Exception):
            parse_config_file(str(cfg_path))

    def test_flags_override_file(self, tmp_path):
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text("dim = 3\nseed = 41\n")
        out = tmp_path / "gen"
        rc = _run("generate", "--config", str(cfg_path), "--model", "synthetic",
                  "--dim", "2", "--branches", "2", "--obs", "3",
                  "--out-dir", str(out))
        assert rc == 0
        manifest = (out / "manifest.txt").read_text()
        assert "dim = 2" in manifest      # flag wins
        assert "seed = 41" in manifest    # file value survives


class TestCheck:
    def test_all_pass_and_fast(self, capsys):
        t0 = time.perf_counter()
        rc = _run("check")
        elapsed = time.perf_counter() - t0
        out = capsys.readouterr().out
        assert rc == 0
        assert out.count("PASS") == len(checks.CHECKS)
        assert "FAIL" not in out
        assert elapsed < 60.0

    def test_detects_corrupted_diag_transform(self, monkeypatch, capsys):
        def broken(x, gamma=1.0):
            x = np.asarray(x, dtype=float)
            # gamma sign flip: psi(x) = (x + sqrt(x^2 - 4 gamma)) / 2
            return 0.5 * (x + np.sqrt(np.maximum(x * x - 4.0 * gamma, 0.0)))

        monkeypatch.setattr(gaussmath, "diag_transform", broken)
        failures = checks.run_checks(out=lambda *_: None)
        assert failures > 0


class TestPaperShapeConfig:
    def test_small_scale_synthetic_shape(self, tmp_path):
        # N=10 branches of 100 observations with 10-dim covariates
        out = tmp_path / "smallscale"
        rc = _run("generate", "--model", "synthetic", "--dim", "10",
                  "--branches", "10", "--obs", "100", "--seed", "1",
                  "--out-dir", str(out))
        assert rc == 0
        data = load_dataset(str(out / "data"))
        assert data.n_branches == 10
        assert data.covariate_dim == 10
        assert all(b.n == 100 for b in data.branches)
        assert (out / "oracle.txt").exists()
