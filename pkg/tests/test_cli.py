"""End-to-end tests of the command line on a tiny IDX dataset."""

from pathlib import Path

import numpy as np
import pytest

from pepsnet import PepsClassifier
from pepsnet.cli import EXIT_FAILURE, EXIT_OK, SWEEP_HEADER, main, mlp_parameter_count, read_image


@pytest.fixture
def run_args(data_dir: Path, tmp_path: Path) -> list[str]:
    config = tmp_path / "run.yaml"
    config.write_text("val_count: 8\nbatch_size: 8\nchi: 4\n")
    return [
        "--config",
        str(config),
        "--data-dir",
        str(data_dir),
        "--out",
        str(tmp_path / "out"),
        "--no-progress",
    ]


def test_mlp_reference_size():
    assert mlp_parameter_count(784) == 795010


class TestTrain:
    def test_zero_epochs_writes_initial_checkpoint(self, run_args, tmp_path, capsys):
        assert main(["train", *run_args, "--epochs", "0"]) == EXIT_OK
        assert (tmp_path / "out" / "model.peps").is_file()
        assert "initial checkpoint" in capsys.readouterr().out

    def test_one_epoch(self, run_args, tmp_path, capsys):
        assert main(["train", *run_args, "--epochs", "1", "--d", "1"]) == EXIT_OK
        lines = (tmp_path / "out" / "metrics.csv").read_text().splitlines()
        assert len(lines) == 3
        assert "best val acc" in capsys.readouterr().out
        model = PepsClassifier.load(tmp_path / "out" / "model.peps")
        assert model.config.bond_dim == 1
        assert model.config.chi == 4

    def test_missing_data_dir(self, tmp_path, capsys):
        code = main(["train", "--data-dir", str(tmp_path / "nowhere"), "--out", str(tmp_path), "--no-progress"])
        assert code == EXIT_FAILURE
        assert "error:" in capsys.readouterr().err

    def test_invalid_flag_value(self, run_args):
        assert main(["train", *run_args, "--d", "0"]) == EXIT_FAILURE


class TestCheckpointCommands:
    @pytest.fixture
    def trained(self, run_args):
        assert main(["train", *run_args, "--epochs", "1"]) == EXIT_OK
        return run_args

    def test_eval(self, trained, capsys):
        assert main(["eval", *trained, "--split", "val"]) == EXIT_OK
        assert "(8 images)" in capsys.readouterr().out

    def test_predict_by_index(self, trained, capsys):
        assert main(["predict", *trained, "--index", "0"]) == EXIT_OK
        out = capsys.readouterr().out.splitlines()
        assert out[-1].startswith("predicted: ")
        probs = [float(line.split(": ")[1]) for line in out[-11:-1]]
        assert sum(probs) == pytest.approx(1.0, abs=1e-5)

    def test_predict_image_file(self, trained, tmp_path, capsys):
        from PIL import Image

        path = tmp_path / "digit.png"
        Image.fromarray(np.full((4, 4), 230, dtype=np.uint8)).save(path)
        assert main(["predict", *trained, "--image", str(path)]) == EXIT_OK
        assert "predicted: " in capsys.readouterr().out

    def test_inspect(self, trained, capsys):
        assert main(["inspect", *trained]) == EXIT_OK
        out = capsys.readouterr().out
        assert "L: 2" in out
        assert "mlp_reference_parameters: " in out

    def test_bad_checkpoint(self, run_args, tmp_path):
        broken = tmp_path / "broken.peps"
        broken.write_bytes(b"not a checkpoint")
        assert main(["inspect", *run_args, "--checkpoint", str(broken)]) == EXIT_FAILURE

    def test_missing_checkpoint(self, run_args):
        assert main(["inspect", *run_args]) == EXIT_FAILURE


def test_sweep_writes_summary(run_args, tmp_path):
    code = main(["sweep", *run_args, "--epochs", "1", "--bond-dims", "1,2", "--chis", "4"])
    assert code == EXIT_OK
    lines = (tmp_path / "out" / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("# config: ")
    assert lines[1] == ",".join(SWEEP_HEADER)
    assert [line.split(",")[:2] for line in lines[2:]] == [["1", "4"], ["2", "4"]]
    assert (tmp_path / "out" / "model_D2_chi4.peps").is_file()


def test_read_image_resizes_to_grayscale(tmp_path):
    from PIL import Image

    path = tmp_path / "rgb.png"
    Image.new("RGB", (8, 8), (255, 255, 255)).save(path)
    pixels = read_image(path, 4)
    assert pixels.shape == (4, 4)
    np.testing.assert_allclose(pixels, 1.0)
