import numpy as np
import pytest

from adaptsmooth.cli import run
from adaptsmooth.gaussian_filter import build_filter
from adaptsmooth.volume_io import Volume, read_volume, write_volume


@pytest.fixture()
def sample_volume(tmp_path):
    rng = np.random.default_rng(0)
    v = Volume(rng.normal(0.5, 0.1, (10, 10, 10)).clip(0, 1), 3.0)
    path = tmp_path / "in.vol"
    write_volume(v, path)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Generate a small dataset and train a model once for the eval tests."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    spec = root / "phantom.cfg"
    spec.write_text("dims = 16,16,16\n"
                    "n_subjects = 4\n"
                    "volumes_per_subject_per_class = 3\n"
                    "center_offset_x = 3\n"
                    "blob_radius = 1.3\n"
                    "noise_levels = 0.0,0.2\n"
                    "split_counts = 2,1,1\n")
    assert run(["gen-phantom", "--spec", str(spec), "--out", str(data),
                "--seed", "3"]) == 0
    cfg = root / "train.cfg"
    cfg.write_text("learning_rate = 0.1\nmax_epochs = 15\nwidth_m = 8\n")
    out = root / "model"
    assert run(["train", "--config", str(cfg), "--data", str(data),
                "--out", str(out), "--seed", "43"]) == 0
    return data, out


class TestSmooth:
    def test_both_width_flags_is_usage_error(self, sample_volume, tmp_path, capsys):
        code = run(["smooth", "--in", str(sample_volume), "--sigma-f", "1.0",
                    "--fwhm-mm", "8.0", "--out", str(tmp_path / "o.vol")])
        assert code == 1
        assert "ERROR 1" in capsys.readouterr().err

    def test_neither_width_flag_is_usage_error(self, sample_volume, tmp_path):
        assert run(["smooth", "--in", str(sample_volume),
                    "--out", str(tmp_path / "o.vol")]) == 1

    def test_matches_library_smoothing(self, sample_volume, tmp_path):
        out = tmp_path / "o.vol"
        assert run(["smooth", "--in", str(sample_volume), "--sigma-f", "1.0",
                    "--out", str(out)]) == 0
        got = read_volume(out)
        x = read_volume(sample_volume).data
        from adaptsmooth.conv3d import convolve_separable
        want = convolve_separable(x, build_filter(1.0, 4.0).profile_1d)
        # the VOL1 payload is float32, so the round trip costs precision
        np.testing.assert_allclose(got.data, want, atol=1e-6)

    def test_fwhm_flag_uses_voxel_size(self, sample_volume, tmp_path):
        o1, o2 = tmp_path / "a.vol", tmp_path / "b.vol"
        assert run(["smooth", "--in", str(sample_volume), "--fwhm-mm", "8.0",
                    "--out", str(o1)]) == 0
        assert run(["smooth", "--in", str(sample_volume), "--sigma-f", "1.13243",
                    "--out", str(o2)]) == 0
        np.testing.assert_allclose(read_volume(o1).data, read_volume(o2).data,
                                   atol=1e-6)

    def test_missing_input_file(self, tmp_path, capsys):
        code = run(["smooth", "--in", str(tmp_path / "nope.vol"),
                    "--sigma-f", "1.0", "--out", str(tmp_path / "o.vol")])
        assert code == 2
        assert "ERROR 2" in capsys.readouterr().err


class TestInspectFilter:
    def test_single_cell_filter(self, capsys):
        assert run(["inspect-filter", "--sigma-f", "0.3"]) == 0
        out = capsys.readouterr().out.splitlines()
        head = out[0].split()
        assert float(head[0]) == 0.3 and int(head[2]) == 0
        assert float(out[1]) == 1.0
        assert "FWHM: 2.119 mm" in out[2]

    def test_weight_lines_count(self, capsys):
        assert run(["inspect-filter", "--sigma-f", "1.0"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert len(out) == 1 + 5 ** 3 + 1  # header, weights, FWHM line

    def test_invalid_sigma(self, capsys):
        assert run(["inspect-filter", "--sigma-f", "-1.0"]) == 2


class TestNoiseCommands:
    def test_add_then_estimate(self, sample_volume, tmp_path, capsys):
        noisy = tmp_path / "noisy.vol"
        assert run(["add-noise", "--in", str(sample_volume), "--sigma", "0.3",
                    "--seed", "1", "--out", str(noisy)]) == 0
        assert run(["estimate-noise", "--in", str(noisy)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        est = float(lines[-1].split(":")[1])
        assert 0.22 <= est <= 0.38  # base volume contributes ~0.1 itself

    def test_add_noise_deterministic(self, sample_volume, tmp_path):
        a, b = tmp_path / "a.vol", tmp_path / "b.vol"
        for out in (a, b):
            assert run(["add-noise", "--in", str(sample_volume), "--sigma", "0.2",
                        "--seed", "9", "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_smoothing_reduces_estimated_noise(self, sample_volume, tmp_path, capsys):
        noisy = tmp_path / "noisy.vol"
        smoothed = tmp_path / "smoothed.vol"
        assert run(["add-noise", "--in", str(sample_volume), "--sigma", "0.3",
                    "--seed", "2", "--out", str(noisy)]) == 0
        assert run(["estimate-noise", "--in", str(noisy)]) == 0
        before = float(capsys.readouterr().out.strip().splitlines()[-1].split(":")[1])
        assert run(["smooth", "--in", str(noisy), "--sigma-f", "1.0",
                    "--out", str(smoothed)]) == 0
        assert run(["estimate-noise", "--in", str(smoothed)]) == 0
        after = float(capsys.readouterr().out.strip().splitlines()[-1].split(":")[1])
        assert after < before / 2


class TestTrainEvaluate:
    def test_train_writes_artifacts(self, trained):
        _, out = trained
        for name in ("params_net.txt", "classifier.txt", "report.csv", "summary.txt"):
            assert (out / name).exists()
        header = (out / "report.csv").read_text().splitlines()[0]
        assert header == "epoch,train_loss,val_loss,val_accuracy"

    def test_evaluate_adaptive(self, trained, capsys):
        data, out = trained
        assert run(["evaluate", "--weights", str(out), "--data", str(data),
                    "--split", "test"]) == 0
        out_text = capsys.readouterr().out
        assert "mean sigma_f" in out_text
        assert "overall accuracy:" in out_text

    def test_evaluate_fixed_fwhm(self, trained, capsys):
        data, out = trained
        assert run(["evaluate", "--weights", str(out), "--data", str(data),
                    "--split", "test", "--fixed-fwhm-mm", "8.0"]) == 0
        out_text = capsys.readouterr().out
        assert "FWHM 8 mm fixed" in out_text
        assert "mean sigma_f" not in out_text

    def test_evaluate_missing_weights(self, trained, tmp_path, capsys):
        data, _ = trained
        assert run(["evaluate", "--weights", str(tmp_path), "--data",
                    str(data)]) == 2

    def test_grid_search_writes_results(self, trained, tmp_path, capsys):
        data, _ = trained
        cfg = tmp_path / "grid.cfg"
        cfg.write_text("max_epochs = 3\nwidth_m = 8\n"
                       "lr_grid = 0.01,0.1\nlambda_grid = 0.0\n")
        out = tmp_path / "grid"
        assert run(["grid-search", "--config", str(cfg), "--data", str(data),
                    "--out", str(out), "--seed", "1"]) == 0
        lines = (out / "grid_results.csv").read_text().splitlines()
        assert lines[0].startswith("learning_rate,lambda_l2,")
        assert len(lines) == 3
        assert "best: learning_rate=" in capsys.readouterr().out


class TestParsing:
    def test_unknown_command(self, capsys):
        assert run(["frobnicate"]) == 1
        assert "ERROR 1" in capsys.readouterr().err

    def test_missing_required_flag(self, capsys):
        assert run(["gen-phantom"]) == 1

    def test_bad_phantom_spec_key(self, tmp_path, capsys):
        spec = tmp_path / "bad.cfg"
        spec.write_text("wibble = 3\n")
        assert run(["gen-phantom", "--spec", str(spec),
                    "--out", str(tmp_path / "d")]) == 2
        assert "unknown key" in capsys.readouterr().err
