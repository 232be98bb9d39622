import logging
import math
import warnings

import numpy as np
import pytest

from tailpcc import cli, harness, metrics
from tailpcc.config import ConfigError, RunConfig, load_run_config, parse_config_text, parse_overrides
from tailpcc.pcio import load_pointcloud

# a C = 32 model small enough to train in seconds
TINY = ["--data.count=4", "--data.test_count=2", "--data.points=128", "--train.epochs=2",
        "--train.batch_size=2", "--model.hidden=8"]


def _train(tmp_path, name, *extra):
    out = tmp_path / f"{name}.tpck"
    assert cli.main(["train", "--out", str(out), *TINY, *extra]) == cli.EXIT_OK
    return out


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def tiny_ck(workdir):
    return _train(workdir, "tiny")


@pytest.fixture(scope="module")
def cloud_file(workdir):
    paths = harness.cmd_synth_data(workdir / "data", count=1, points=300, seed=5)
    return paths[0]


class TestConfig:
    def test_file_with_comments(self):
        flat = parse_config_text("# run\nmodel.C = 16  # narrow\n\ntrain.lambda=1e-3\n")
        assert flat == {"model.C": "16", "train.lambda": "1e-3"}

    def test_overrides_beat_file(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("model.C = 16\ndrop.beta = 0.5\n")
        run = load_run_config(p, ["--model.C=24"])
        assert run.model.C == 24 and run.train.beta == 0.5

    def test_defaults(self):
        run = RunConfig.from_flat({})
        assert (run.train.epochs, run.train.batch_size, run.train.lr) == (50, 32, 1e-3)
        assert run.train.strategy == "combined"

    def test_flat_round_trip(self):
        run = load_run_config(None, ["--model.stages=1/2,1/4", "--drop.strategy=feature_only"])
        again = RunConfig.from_flat(run.to_flat())
        assert again == run

    @pytest.mark.parametrize("bad", [["--model.X=1"], ["model.C=3"], ["--model.C=abc"],
                                     ["--train.lambda=-1"], ["--drop.rho_min=0.5", "--drop.rho_max=0.2"],
                                     ["--drop.strategy=both"], ["--data.count=2", "--data.test_count=2"]])
    def test_rejected(self, bad):
        with pytest.raises(ConfigError):
            load_run_config(None, bad)

    def test_unknown_key_in_file_names_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text("model.C = 8\nfoo.bar = 1\n")

    def test_lambda_band_warns(self):
        with pytest.warns(UserWarning, match="lambda"):
            load_run_config(None, ["--train.lambda=0.1"])
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            load_run_config(None, ["--train.lambda=1e-5"])

    def test_override_parse(self):
        assert parse_overrides(["--train.lr=0.5"]) == {"train.lr": "0.5"}


class TestTrainVerb:
    def test_identical_runs_give_identical_checkpoints(self, tmp_path):
        a = _train(tmp_path, "a")
        b = _train(tmp_path, "b")
        assert a.read_bytes() == b.read_bytes()

    def test_lr_halves_at_epoch_15(self, tmp_path):
        out = _train(tmp_path, "lr", "--train.epochs=16", "--data.count=3", "--data.test_count=1")
        rows = (tmp_path / "lr.tpck.log.csv").read_text().splitlines()[1:]
        lrs = {int(r.split(",")[0]): float(r.split(",")[1]) for r in rows}
        assert lrs[14] == 1e-3 and lrs[15] == 5e-4
        assert harness.load_checkpoint(out).epoch == 16

    def test_resume_continues_epochs(self, tmp_path, tiny_ck):
        out = tmp_path / "more.tpck"
        assert cli.main(["train", "--out", str(out), "--resume", str(tiny_ck), *TINY,
                         "--train.epochs=3"]) == cli.EXIT_OK
        assert harness.load_checkpoint(out).epoch == 3

    def test_config_error_exit_code(self, tmp_path):
        assert cli.main(["train", "--out", str(tmp_path / "x"), "--model.nope=1"]) == cli.EXIT_CONFIG


class TestCompressDecompress:
    def test_stats_and_pipeline_equivalence(self, tmp_path, tiny_ck, cloud_file):
        stream, rec = tmp_path / "s.bin", tmp_path / "r.ply"
        stats = harness.cmd_compress(tiny_ck, cloud_file, stream)
        assert stats.n == 300 and stats.file_bpp >= stats.entropy_bpp
        assert cli.main(["decompress", "--checkpoint", str(tiny_ck), "--input", str(stream),
                         "--output", str(rec)]) == cli.EXIT_OK
        ck = harness.load_checkpoint(tiny_ck)
        pc = harness.prepare_cloud(load_pointcloud(cloud_file))
        mem = harness.masked_decode(ck.model, pc, 1.0, ck.run)
        from_file = metrics.chamfer_distance(pc, load_pointcloud(rec))
        assert from_file == pytest.approx(metrics.chamfer_distance(pc, mem), abs=1e-12)

    def test_full_ratio_flag_is_default_output(self, tmp_path, tiny_ck, cloud_file):
        stream = tmp_path / "s.bin"
        harness.cmd_compress(tiny_ck, cloud_file, stream)
        outs = []
        for extra in ([], ["--pr", "1.0"]):
            out = tmp_path / f"r{len(outs)}.ply"
            cli.main(["decompress", "--checkpoint", str(tiny_ck), "--input", str(stream),
                      "--output", str(out), *extra])
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    @pytest.mark.parametrize("alpha", [1 / 32, 0.25, 17 / 32])
    def test_truncated_file_matches_truncate_operation(self, tmp_path, tiny_ck, cloud_file, alpha):
        stream, cut = tmp_path / "s.bin", tmp_path / "cut.bin"
        harness.cmd_compress(tiny_ck, cloud_file, stream)
        assert cli.main(["truncate", "--input", str(stream), "--output", str(cut), "--pr", repr(alpha)]) == 0
        assert len(cut.read_bytes()) < len(stream.read_bytes())
        a, b = tmp_path / "a.ply", tmp_path / "b.ply"
        harness.cmd_decompress(tiny_ck, cut, a)
        harness.cmd_decompress(tiny_ck, stream, b, alpha)
        assert a.read_bytes() == b.read_bytes()

    def test_pr_003_consumes_one_feature_layer(self, tmp_path, tiny_ck, cloud_file, caplog):
        stream = tmp_path / "s.bin"
        harness.cmd_compress(tiny_ck, cloud_file, stream)
        with caplog.at_level(logging.INFO, logger="tailpcc"):
            cli.main(["decompress", "--checkpoint", str(tiny_ck), "--input", str(stream),
                      "--output", str(tmp_path / "r.ply"), "--pr", "0.03"])
        assert "consumed 1 feature layer(s)" in caplog.text

    def test_off_grid_ratio_rounds_up_and_warns(self, caplog):
        with caplog.at_level(logging.WARNING, logger="tailpcc"):
            assert harness.snap_alpha(0.03, 32) == 1 / 32
        assert "off the 1/32 grid" in caplog.text
        assert harness.snap_alpha(0.5, 32) == 0.5

    def test_exit_codes(self, tmp_path, tiny_ck, cloud_file):
        empty = tmp_path / "empty.ply"
        empty.write_bytes(b"")
        out = str(tmp_path / "o.bin")
        assert cli.main(["compress", "--checkpoint", str(tiny_ck), "--input", str(empty),
                         "--output", out]) == cli.EXIT_PARSE
        assert cli.main(["compress", "--checkpoint", str(tmp_path / "none.tpck"), "--input", str(cloud_file),
                         "--output", out]) == cli.EXIT_IO
        garbage = tmp_path / "g.bin"
        garbage.write_bytes(b"NOTASTREAM" * 4)
        assert cli.main(["decompress", "--checkpoint", str(tiny_ck), "--input", str(garbage),
                         "--output", str(tmp_path / "r.ply")]) == cli.EXIT_PARSE
        harness.cmd_compress(tiny_ck, cloud_file, out)
        assert cli.main(["decompress", "--checkpoint", str(tiny_ck), "--input", out,
                         "--output", str(tmp_path / "r.ply"), "--pr", "1.5"]) == cli.EXIT_CONFIG
        assert cli.main(["evaluate", str(cloud_file), str(cloud_file), "--stray"]) == cli.EXIT_CONFIG

    def test_mismatched_checkpoint_is_model_error(self, tmp_path, tiny_ck, cloud_file):
        other = _train(tmp_path, "c16", "--model.C=16")
        stream = tmp_path / "s.bin"
        harness.cmd_compress(tiny_ck, cloud_file, stream)
        assert cli.main(["decompress", "--checkpoint", str(other), "--input", str(stream),
                         "--output", str(tmp_path / "r.ply")]) == cli.EXIT_MODEL


class TestEvaluateAndSynth:
    def test_synth_data_files(self, tmp_path):
        assert cli.main(["synth-data", "--out", str(tmp_path), "--count", "3", "--points", "64",
                         "--format", "csv_xyz"]) == 0
        files = sorted(p.name for p in tmp_path.iterdir())
        assert files == ["synthetic-000.csv", "synthetic-001.csv", "synthetic-002.csv"]
        assert load_pointcloud(tmp_path / files[0]).n == 64

    def test_synth_data_is_seeded(self, tmp_path):
        a = harness.cmd_synth_data(tmp_path / "a", 2, 64, seed=3)
        b = harness.cmd_synth_data(tmp_path / "b", 2, 64, seed=3)
        assert [open(p, "rb").read() for p in a] == [open(p, "rb").read() for p in b]

    def test_evaluate_identity(self, cloud_file, capsys):
        assert cli.main(["evaluate", str(cloud_file), str(cloud_file)]) == 0
        assert "cd=0 psnr_d1=inf psnr_d2=inf" in capsys.readouterr().out


@pytest.fixture(scope="module")
def sweep(workdir, tiny_ck):
    fo = _train(workdir, "fo", "--drop.strategy=feature_only")
    out = workdir / "rd.csv"
    assert cli.main(["rd-sweep", "--checkpoints", str(tiny_ck), str(fo), "--out", str(out)]) == 0
    return out


class TestRDSweep:
    def test_grid_rows(self, sweep):
        rows = harness.read_rd_report(sweep)
        cells = {}
        for r in rows:
            cells.setdefault((r["strategy"], r["lambda"], r["cloud"]), []).append(r["alpha"])
        assert len(cells) == 4
        for alphas in cells.values():
            assert alphas == [k / 32 for k in range(1, 33)]
        assert [r["lambda"] for r in rows] == sorted(r["lambda"] for r in rows)

    def test_rows_are_consistent(self, sweep):
        for r in harness.read_rd_report(sweep):
            assert r["file_bpp"] >= r["entropy_bpp"] > 0
            assert r["k_z"] == math.ceil(r["alpha"] * 32 - 1e-9)
            if r["strategy"] == "feature_only":
                assert r["k_xyz"] == 16

    def test_bd_rate_recomputed_from_csv(self, sweep):
        rows = harness.read_rd_report(sweep)
        bd_lines = (sweep.parent / "rd.csv.bd.csv").read_text().splitlines()
        reported = float(bd_lines[1].split(",")[-1])

        def curve(strategy):
            sel = [r for r in rows if r["strategy"] == strategy]
            alphas = sorted({r["alpha"] for r in sel})
            return [(np.mean([r["entropy_bpp"] for r in sel if r["alpha"] == a]),
                     np.mean([r["psnr_d2"] for r in sel if r["alpha"] == a])) for a in alphas]

        expected = metrics.bd_rate(curve("combined"), curve("feature_only"))
        assert reported == expected

    def test_gnuplot_blocks(self, sweep):
        blocks = [b for b in (sweep.parent / "rd.csv.dat").read_text().split("\n\n\n") if b.strip()]
        assert len(blocks) == 2
        data = [ln for ln in blocks[0].splitlines() if not ln.startswith("#")]
        assert len(data) == 32 and len(data[0].split()) == 6

    def test_versioned_schema(self, sweep, tmp_path):
        assert sweep.read_text().startswith("# rd-report schema 1\n")
        bad = tmp_path / "bad.csv"
        bad.write_text("# rd-report schema 99\nstrategy\n")
        with pytest.raises(ValueError, match="schema"):
            harness.read_rd_report(bad)
