"""CLI tests: exit codes, artifacts, determinism, and seed resolution.

A module-scoped dataset + one short training run back the eval/visualize/
score-gate commands so each test stays fast.
"""

import os

import numpy as np
import pytest

from mdcm.cli import build_parser, main, resolve_config
from mdcm.config import RunConfig

TINY = ["--set", "backbone.image_size=32",
        "--set", "backbone.patch_size=2",
        "--set", "backbone.embed_dim=8",
        "--set", "backbone.stage_dims=8,16,32,64",
        "--set", "backbone.stage_depths=1,1,1,1",
        "--set", "data.n_classes=4",
        "--set", "train.epochs=1",
        "--set", "train.batch_size=8"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    run = str(root / "run")
    rc = main(["data", "gen", "--out", data, "--seed", "3",
               "--train", "16", "--test", "8", "--classes", "4",
               "--size", "32"])
    assert rc == 0
    rc = main(["train", "--data", data, "--out", run, "--seed", "3"] + TINY)
    assert rc == 0
    return {"data": data, "run": run,
            "ckpt": os.path.join(run, "final.ckpt")}


class TestDataGen:
    def test_same_flags_same_hash(self, tmp_path, capsys):
        hashes = []
        for sub in ("a", "b"):
            rc = main(["data", "gen", "--out", str(tmp_path / sub),
                       "--seed", "7", "--train", "8", "--test", "8",
                       "--classes", "4", "--size", "32"])
            assert rc == 0
            out = capsys.readouterr().out
            hashes.append([l for l in out.splitlines()
                           if l.startswith("sha256 ")])
        assert hashes[0] == hashes[1]

    def test_classes_flag_reflected_in_manifest(self, tmp_path, capsys):
        rc = main(["data", "gen", "--out", str(tmp_path / "d"),
                   "--seed", "0", "--train", "12", "--test", "6",
                   "--classes", "6", "--size", "32"])
        assert rc == 0
        labels = {int(line.split("\t")[1])
                  for line in open(tmp_path / "d" / "train.txt")}
        assert labels == set(range(6))

    def test_missing_out_is_usage_error(self, capsys):
        rc = main(["data", "gen", "--seed", "1"])
        assert rc == 2


class TestTrain:
    def test_artifacts_written(self, workspace):
        for name in ("log.csv", "final.ckpt", "best.ckpt", "config.txt"):
            assert os.path.exists(os.path.join(workspace["run"], name))

    def test_rerun_from_config_echo_is_bit_identical(self, workspace,
                                                     tmp_path, capsys):
        echo = os.path.join(workspace["run"], "config.txt")
        out = str(tmp_path / "rerun")
        rc = main(["train", "--data", workspace["data"], "--out", out,
                   "--config", echo])
        assert rc == 0
        for name in ("log.csv", "final.ckpt"):
            a = open(os.path.join(workspace["run"], name), "rb").read()
            b = open(os.path.join(out, name), "rb").read()
            assert a == b, name


class TestEval:
    def test_prints_csv_and_writes_artifacts(self, workspace, tmp_path,
                                             capsys):
        out = str(tmp_path / "eval")
        rc = main(["eval", "--data", workspace["data"],
                   "--checkpoint", workspace["ckpt"], "--out", out,
                   "--seed", "3"] + TINY)
        assert rc == 0
        printed = capsys.readouterr().out
        assert printed.splitlines()[0] == (
            "config,seed,acc_total,acc_small,acc_medium,acc_large,"
            "score_gate,score_sum")
        assert os.path.exists(os.path.join(out, "metrics.csv"))
        assert os.path.exists(os.path.join(out, "config.txt"))
        assert open(os.path.join(out, "metrics.csv")).read() == printed

    def test_eval_twice_identical(self, workspace, capsys):
        outs = []
        for _ in range(2):
            rc = main(["eval", "--data", workspace["data"],
                       "--checkpoint", workspace["ckpt"], "--seed", "3"]
                      + TINY)
            assert rc == 0
            outs.append(capsys.readouterr().out)
        assert outs[0] == outs[1]

    def test_quartile_flag_runs(self, workspace, capsys):
        rc = main(["eval", "--data", workspace["data"],
                   "--checkpoint", workspace["ckpt"], "--quartile",
                   "--seed", "3"] + TINY)
        assert rc == 0

    def test_aggregation_flag_changes_primary_route(self, workspace,
                                                    capsys):
        rows = {}
        for agg in ("gate", "sum"):
            rc = main(["eval", "--data", workspace["data"],
                       "--checkpoint", workspace["ckpt"],
                       "--aggregation", agg, "--seed", "3"] + TINY)
            assert rc == 0
            rows[agg] = capsys.readouterr().out.splitlines()[1].split(",")
        # both runs still report both score columns
        for cells in rows.values():
            assert cells[6] != "" and cells[7] != ""

    def test_missing_checkpoint_is_runtime_error(self, workspace, capsys):
        rc = main(["eval", "--data", workspace["data"],
                   "--checkpoint", "/nonexistent.ckpt", "--seed", "3"]
                  + TINY)
        assert rc == 1

    def test_shape_mismatch_is_runtime_error(self, workspace, capsys):
        # checkpoint was written for the tiny config; default dims differ
        rc = main(["eval", "--data", workspace["data"],
                   "--checkpoint", workspace["ckpt"], "--seed", "3"])
        assert rc == 1
        assert "mdcm: error" in capsys.readouterr().err


class TestVisualize:
    def test_writes_four_overlays(self, workspace, tmp_path, capsys):
        out = str(tmp_path / "vis")
        rc = main(["visualize", "--data", workspace["data"],
                   "--checkpoint", workspace["ckpt"], "--sample", "0",
                   "--out", out, "--seed", "3"] + TINY)
        assert rc == 0
        names = sorted(os.listdir(out))
        assert [n for n in names if n.startswith("overlay")] == [
            f"overlay_stage{i}.ppm" for i in (1, 2, 3, 4)]

    def test_overlay_red_pixels_sit_on_cell_borders(self, workspace,
                                                    tmp_path, capsys):
        import mdcm.data as D
        out = str(tmp_path / "vis")
        rc = main(["visualize", "--data", workspace["data"],
                   "--checkpoint", workspace["ckpt"], "--sample", "1",
                   "--out", out, "--seed", "3"] + TINY)
        assert rc == 0
        img = D.read_ppm(open(os.path.join(out, "overlay_stage1.ppm"),
                              "rb").read())
        red = np.all(np.abs(img - [1.0, 0.0, 0.0]) < 1e-6, axis=2)
        assert red.any()
        ys, xs = np.nonzero(red)
        # stage-1 merged cells are 4px in this config: each red pixel lies
        # on a multiple-of-4 gridline in at least one axis
        on_line = (ys % 4 == 0) | (ys % 4 == 3) | (xs % 4 == 0) | (xs % 4 == 3)
        assert on_line.all()

    def test_bad_sample_id_is_lookup_error(self, workspace, capsys):
        rc = main(["visualize", "--data", workspace["data"],
                   "--checkpoint", workspace["ckpt"], "--sample", "99",
                   "--out", "/tmp/unused", "--seed", "3"] + TINY)
        assert rc == 1
        assert "sample id" in capsys.readouterr().err


class TestScoreGate:
    def test_prints_scores_and_verdict(self, workspace, capsys):
        rc = main(["score-gate", "--data", workspace["data"],
                   "--checkpoint", workspace["ckpt"], "--seed", "3"] + TINY)
        assert rc == 0
        out = capsys.readouterr().out
        assert "score_gate=" in out and "score_sum=" in out
        assert ("gate >= sum" in out) or ("gate < sum" in out)


class TestConfigResolution:
    def test_set_overrides_and_seed_flag(self):
        parser = build_parser()
        args = parser.parse_args(["train", "--data", "x", "--out", "y",
                                  "--seed", "11",
                                  "--set", "optim.lr=0.01"])
        cfg = resolve_config(args)
        assert cfg.seed == 11 and cfg.optim.lr == 0.01

    def test_env_seed_default(self, monkeypatch):
        monkeypatch.setenv("MDCM_SEED", "42")
        parser = build_parser()
        args = parser.parse_args(["train", "--data", "x", "--out", "y"])
        assert resolve_config(args).seed == 42

    def test_explicit_seed_beats_env(self, monkeypatch):
        monkeypatch.setenv("MDCM_SEED", "42")
        parser = build_parser()
        args = parser.parse_args(["train", "--data", "x", "--out", "y",
                                  "--seed", "5"])
        assert resolve_config(args).seed == 5

    def test_bad_env_seed_is_config_error(self, monkeypatch, capsys):
        monkeypatch.setenv("MDCM_SEED", "not-a-number")
        rc = main(["train", "--data", "x", "--out", "y"])
        assert rc == 2

    def test_malformed_set_is_usage_error(self, capsys):
        rc = main(["train", "--data", "x", "--out", "y", "--set", "bogus"])
        assert rc == 2

    def test_unknown_key_is_usage_error(self, capsys):
        rc = main(["train", "--data", "x", "--out", "y",
                   "--set", "nope.nothing=1"])
        assert rc == 2

    def test_unknown_command_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == 2

    def test_gamma_alias(self):
        parser = build_parser()
        args = parser.parse_args(["eval", "--data", "x",
                                  "--checkpoint", "c",
                                  "--msca-gamma", "0.9"])
        assert resolve_config(args).msca.gamma == 0.9
