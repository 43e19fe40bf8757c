import csv
import logging
import shutil

import pytest

from core.file_formats import read_wem1
from main import main


@pytest.fixture(autouse=True)
def release_log_handlers():
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, logging.FileHandler):
            root.removeHandler(handler)
            handler.close()


@pytest.fixture
def trained(tmp_path, config_writer):
    cfg = config_writer(tmp_path / "tiny.cfg")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


class TestSynth:

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a.wem1", "b.wem1"):
            argv = ["synth", "--count", "3", "--height", "16", "--width", "16", "--seed", "7",
                    "--out", str(tmp_path / name)]
            assert main(argv) == 0
        assert (tmp_path / "a.wem1").read_bytes() == (tmp_path / "b.wem1").read_bytes()
        assert read_wem1(tmp_path / "a.wem1").shape == (3, 16, 16)

    def test_zero_count(self, tmp_path, capsys):
        assert main(["synth", "--count", "0", "--out", str(tmp_path / "x.wem1")]) == 2
        assert "error:" in capsys.readouterr().err
        assert not (tmp_path / "x.wem1").exists()


class TestTrain:

    def test_outputs(self, trained):
        _, out = trained
        lines = (out / "learning_curve.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0].startswith("iteration,")
        assert len(lines) == 1 + 12
        assert (out / "checkpoint.asc1").exists()
        assert (out / "checkpoints" / "checkpoint_00000012.asc1").exists()
        assert (out / "run.log").exists()

    def test_repeat_run_is_identical(self, trained, tmp_path):
        cfg, out = trained
        again = tmp_path / "again"
        assert main(["train", "--config", str(cfg), "--out", str(again)]) == 0
        assert (again / "learning_curve.csv").read_bytes() == (out / "learning_curve.csv").read_bytes()
        assert (again / "checkpoint.asc1").read_bytes() == (out / "checkpoint.asc1").read_bytes()

    def test_resume_reproduces_curve(self, trained, tmp_path):
        cfg, out = trained
        resumed = tmp_path / "resumed"
        shutil.copytree(out, resumed)
        checkpoint = resumed / "checkpoints" / "checkpoint_00000006.asc1"
        assert main(["train", "--config", str(cfg), "--out", str(resumed), "--checkpoint", str(checkpoint)]) == 0
        assert (resumed / "learning_curve.csv").read_bytes() == (out / "learning_curve.csv").read_bytes()

    def test_bad_config(self, tmp_path, config_writer):
        cfg = config_writer(tmp_path / "bad.cfg", extra="gamm = 0.97\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 2


class TestSweep:

    @pytest.mark.parametrize("optimizer", ["adam", "sgd"])
    def test_writes_rate_and_loss(self, tmp_path, config_writer, optimizer):
        cfg = config_writer(tmp_path / "tiny.cfg", extra="eval_every = 12\n")
        out = tmp_path / "sweep"
        assert main(["sweep", "--config", str(cfg), "--out", str(out), "--optimizer", optimizer]) == 0
        with open(out / f"lr_sweep_{optimizer}.csv", newline="", encoding="utf-8") as handle:
            rows = list(csv.DictReader(handle))
        assert list(rows[0]) == ["iteration", "lr_gen", "gen_loss"]
        assert [int(r["iteration"]) for r in rows] == list(range(1, 13))
        assert float(rows[0]["lr_gen"]) == pytest.approx(10 ** -6.5)
        assert float(rows[-1]["lr_gen"]) == pytest.approx(10 ** 0.5)
        assert rows[0]["gen_loss"] == "" and rows[-1]["gen_loss"] != ""
        assert not (out / "checkpoint.asc1").exists()

    def test_unknown_optimizer(self, tmp_path, config_writer):
        cfg = config_writer(tmp_path / "tiny.cfg")
        with pytest.raises(SystemExit):
            main(["sweep", "--config", str(cfg), "--optimizer", "rmsprop"])


class TestEvalAndRender:

    @pytest.mark.parametrize("mode", ["adaptive", "spiral"])
    def test_eval_csv(self, trained, mode, capsys):
        cfg, out = trained
        assert main(["eval", "--config", str(cfg), "--out", str(out), "--mode", mode]) == 0
        lines = (out / f"eval_{mode}.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "mean,std,count"
        mean, std, count = lines[1].split(",")
        assert float(mean) >= 0.0 and float(std) >= 0.0
        assert int(count) == 2
        assert "mean,std,count" in capsys.readouterr().out

    def test_eval_missing_checkpoint(self, tmp_path, config_writer):
        cfg = config_writer(tmp_path / "tiny.cfg")
        assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == 2

    def test_render(self, trained):
        cfg, out = trained
        assert main(["render", "--config", str(cfg), "--out", str(out), "--image-index", "1"]) == 0
        for name in ("scan.pgm", "completion.pgm", "target.pgm"):
            payload = (out / name).read_bytes()
            assert payload.startswith(b"P5\n16 16\n255\n")
            assert len(payload) == len(b"P5\n16 16\n255\n") + 256

    def test_render_bad_index(self, trained):
        cfg, out = trained
        assert main(["render", "--config", str(cfg), "--out", str(out), "--image-index", "99"]) == 2
