import csv
import json
from pathlib import Path

import numpy as np
import pytest

from anchormvs.cli import main
from anchormvs.pfm import read_pfm, write_pfm
from anchormvs.pipeline import PipelineConfig, TrainConfig
from test_pipeline import TINY


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def seq(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "seq"
    assert main(["synth", "--out", str(out), "--width", "32", "--height", "32", "--frames", "3",
                 "--num-sources", "2", "--seed", "4"]) == 0
    return out


@pytest.fixture(scope="module")
def run(seq):
    root = seq.parent / "run"
    cfg = PipelineConfig(model=TINY, train=TrainConfig(steps=2, window=3, checkpoint_every=0))
    root.mkdir()
    (root / "cfg.json").write_text(cfg.to_json())
    assert main(["train", "--seq", str(seq), "--out", str(root), "--config", str(root / "cfg.json")]) == 0
    return root


class TestSynth:
    def test_layout(self, seq):
        names = sorted(p.name for p in seq.iterdir())
        assert names == ["frame_0000", "frame_0001", "frame_0002", "seq.json"]
        assert sorted(p.name for p in (seq / "frame_0001").iterdir()) == [
            "camera.json", "depth.pfm", "prompt.pfm", "view_00.png"]

    def test_seeded_output_is_bitwise(self, seq, tmp_path):
        again = tmp_path / "again"
        assert main(["synth", "--out", str(again), "--width", "32", "--height", "32", "--frames", "3",
                     "--num-sources", "2", "--seed", "4", "--jobs", "2"]) == 0
        assert _tree(again) == _tree(seq)

    def test_synth_prompt(self, seq, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out in (out_a, out_b):
            assert main(["synth-prompt", "--seq", str(seq), "--out", str(out), "--beams", "8",
                         "--dropout", "0.3", "--noise", "0.01", "--seed", "3"]) == 0
        assert _tree(out_a) == _tree(out_b)
        dense = read_pfm(seq / "frame_0000" / "depth.pfm")
        sparse = read_pfm(out_a / "frame_0000" / "prompt.pfm")
        assert 0 < np.count_nonzero(sparse) < np.count_nonzero(dense)
        np.testing.assert_array_equal(read_pfm(out_a / "frame_0000" / "depth.pfm"), dense)


class TestEval:
    def test_pred_equals_gt(self, seq, tmp_path):
        out = tmp_path / "metrics.json"
        assert main(["eval", "--pred", str(seq), "--gt", str(seq), "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["mean"] == {"mae": 0.0, "absrel": 0.0, "tau": 1.0}
        assert len(report["per_image"]) == 3
        assert report["tae"] is not None

    def test_flat_prediction_directory(self, seq, tmp_path):
        pred = tmp_path / "pred"
        pred.mkdir()
        for k in range(3):
            gt = read_pfm(seq / f"frame_{k:04d}" / "depth.pfm")
            write_pfm(pred / f"frame_{k:04d}.pfm", np.where(gt > 0, 2.0 * gt, 0.0))
        out = tmp_path / "m.json"
        assert main(["eval", "--pred", str(pred), "--gt", str(seq), "--out", str(out)]) == 0
        mean = json.loads(out.read_text())["mean"]
        assert mean["absrel"] == pytest.approx(1.0, abs=1e-6)
        assert mean["tau"] == 0.0

    def test_independent_of_jobs(self, seq, run, tmp_path):
        pred = tmp_path / "pred"
        assert main(["infer", "--seq", str(seq), "--ckpt", str(run / "final.ckpt"), "--out", str(pred)]) == 0
        outs = []
        for jobs in (1, 2, 4):
            out = tmp_path / f"m{jobs}.json"
            assert main(["eval", "--pred", str(pred), "--gt", str(seq), "--out", str(out),
                         "--jobs", str(jobs)]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1] == outs[2]

    def test_missing_predictions(self, seq, tmp_path, capsys):
        (tmp_path / "pred").mkdir()
        write_pfm(tmp_path / "pred" / "frame_0000.pfm", np.ones((32, 32)))
        code = main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(seq), "--out", str(tmp_path / "m")])
        assert code == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "FileNotFoundError" and "frame_0001" in err["message"]


class TestInfer:
    def test_outputs(self, seq, run, tmp_path):
        out = tmp_path / "pred"
        assert main(["infer", "--seq", str(seq), "--ckpt", str(run / "final.ckpt"), "--out", str(out),
                     "--dump-scales", "--dump-cost-volume"]) == 0
        d = read_pfm(out / "frame_0002.pfm")
        assert d.shape == (32, 32) and np.all(np.isfinite(d)) and np.all((d > 1.0) & (d < 20.0))
        for s, size in ((2, 16), (4, 8), (8, 4)):
            assert read_pfm(out / f"frame_0000_s{s}.pfm").shape == (size, size)
        from anchormvs.cost_volume import load_cost_volume_dump
        vol, header = load_cost_volume_dump(out / "frame_0001_cv.pfm")
        assert vol.shape == (TINY.hypotheses, 8, 8) and header["count"] == TINY.hypotheses

    @pytest.mark.parametrize("availability", ["none", "reference_only", "sources_only"])
    def test_availability(self, seq, run, tmp_path, availability):
        out = tmp_path / availability
        assert main(["infer", "--seq", str(seq), "--ckpt", str(run / "final.ckpt"), "--out", str(out),
                     "--availability", availability]) == 0
        assert np.all(np.isfinite(read_pfm(out / "frame_0000.pfm")))

    def test_missing_checkpoint(self, seq, tmp_path, capsys):
        assert main(["infer", "--seq", str(seq), "--ckpt", str(tmp_path / "x.ckpt"), "--out", str(tmp_path)]) == 1
        assert json.loads(capsys.readouterr().err.strip())["error"] == "FileNotFoundError"


class TestSweep:
    def test_csv_and_svg(self, seq, run, tmp_path):
        out, svg = tmp_path / "sweep.csv", tmp_path / "sweep.svg"
        assert main(["sweep", "--axis", "beams", "--levels", "64,16,4", "--seq", str(seq),
                     "--ckpt", str(run / "final.ckpt"), "--out", str(out), "--svg", str(svg)]) == 0
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["level"] for r in rows] == ["64", "16", "4"]
        assert all(np.isfinite(float(r["absrel"])) for r in rows)
        text = svg.read_text()
        assert text.startswith("<svg") and "<polyline" in text

    def test_bad_levels_are_usage_errors(self, seq, run, tmp_path):
        assert main(["sweep", "--axis", "beams", "--levels", "a,b", "--seq", str(seq),
                     "--ckpt", str(run / "final.ckpt"), "--out", str(tmp_path / "s.csv")]) == 2


class TestTrainCommand:
    def test_resume_matches_single_run(self, seq, run, tmp_path):
        cfg = str(run / "cfg.json")
        a = tmp_path / "a"
        assert main(["train", "--seq", str(seq), "--out", str(a), "--config", cfg, "--steps", "1"]) == 0
        assert main(["train", "--seq", str(seq), "--out", str(a), "--config", cfg,
                     "--resume", str(a / "final.ckpt")]) == 0
        assert (a / "loss.csv").read_bytes() == (run / "loss.csv").read_bytes()
        assert (a / "final.ckpt").read_bytes() == (run / "final.ckpt").read_bytes()

    def test_bad_config(self, seq, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"model": {"width": 3}}))
        assert main(["train", "--seq", str(seq), "--out", str(tmp_path), "--config", str(bad)]) == 1
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"] == "ConfigError" and "width" in err["message"]


class TestSurface:
    def test_unknown_flag_exits_2(self, capsys):
        assert main(["eval", "--frobnicate"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_command_exits_2(self):
        assert main(["paint"]) == 2

    def test_help_exits_0(self, capsys):
        assert main(["--help"]) == 0
        assert "gradcheck" in capsys.readouterr().out

    def test_gradcheck_selected(self, capsys):
        assert main(["gradcheck", "--check", "linear", "--check", "masked_softmax"]) == 0
        assert "2/2 gradient checks passed" in capsys.readouterr().out

    def test_gradcheck_unknown(self, capsys):
        assert main(["gradcheck", "--check", "nope"]) == 1
        assert json.loads(capsys.readouterr().err.strip())["error"] == "KeyError"

    def test_gradcheck_needs_selection(self):
        assert main(["gradcheck"]) == 2

    def test_bad_log_level(self, monkeypatch, capsys):
        monkeypatch.setenv("MVS_LOG", "loud")
        assert main(["gradcheck", "--list"]) == 2
        assert "MVS_LOG" in capsys.readouterr().err
