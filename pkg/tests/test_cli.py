import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from sinr.cli import main, read_config_file, resolve, build_parser, UsageError
from sinr.codec import decompress_inr
from sinr.signals import ImageSignal, load_image, procedural_image, psnr, render_inr_image, \
    save_image, save_voxels, sphere_grid

SMALL = ["--hidden-layers", "1", "--width", "64", "--epochs", "30", "--lr", "1e-3"]


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def metrics(path):
    rows = read_csv(path)
    assert rows[0] == ["metric", "value"]
    return {k: v for k, v in rows[1:]}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    img = d / "img.pgm"
    save_image(procedural_image(32, seed=1), img)
    ckpt = d / "m.ckpt"
    assert main(["train", str(img), "-o", str(ckpt), *SMALL]) == 0
    return d, img, ckpt


class TestConfig:
    def test_precedence_flags_over_file_over_defaults(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# comment\nwidth = 32\nrel-tol = 0.1\nlossless = yes\n")
        args = build_parser().parse_args(["pipeline", "x", "-d", "w", "--config", str(cfg),
                                          "--width", "16"])
        merged = resolve(args)
        assert merged["width"] == 16  # flag wins
        assert merged["rel_tol"] == 0.1  # file beats default
        assert merged["lossless"] is True
        assert merged["hidden_layers"] == 3  # default

    @pytest.mark.parametrize("text", ["nonsense line\n", "colour = red\n", "width = wide\n"])
    def test_bad_config(self, tmp_path, text):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(text)
        with pytest.raises(UsageError):
            resolve(build_parser().parse_args(["train", "x", "-o", "y", "--config", str(cfg)]))

    def test_bad_config_exit_code(self, tmp_path, workspace):
        _, img, _ = workspace
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("epochs = many\n")
        assert main(["train", str(img), "-o", str(tmp_path / "x"), "--config", str(cfg)]) == 2
        assert read_config_file  # imported for the public API


class TestExitCodes:
    def test_missing_input_is_usage_error(self, tmp_path, capsys):
        assert main(["train", str(tmp_path / "nope.pgm"), "-o", str(tmp_path / "m")]) == 2
        assert "usage" in capsys.readouterr().err

    def test_missing_arguments(self):
        assert main(["compress"]) == 2

    def test_unknown_command(self):
        assert main(["frobnicate"]) == 2

    @pytest.mark.parametrize("flags", [["--s", "zero"], ["--s", "0"], ["--k2-factor", "0.5"],
                                       ["--bitwidth", "20"], ["--rel-tol", "-1"]])
    def test_invalid_codec_flags(self, workspace, tmp_path, flags):
        _, _, ckpt = workspace
        assert main(["compress", str(ckpt), "-o", str(tmp_path / "o.sinr"), *flags]) == 2
        assert not (tmp_path / "o.sinr").exists()

    def test_truncated_file_leaves_no_output(self, workspace, tmp_path):
        d, _, ckpt = workspace
        sinr = tmp_path / "m.sinr"
        assert main(["compress", str(ckpt), "-o", str(sinr), "--s", "8", "--k2-factor", "2"]) == 0
        bad = tmp_path / "bad.sinr"
        bad.write_bytes(sinr.read_bytes()[:-10])
        out = tmp_path / "out.ckpt"
        assert main(["decompress", str(bad), "-o", str(out)]) == 1
        assert not out.exists()
        assert [p.name for p in tmp_path.iterdir() if ".tmp" in p.name] == []

    def test_modality_mismatch(self, workspace, tmp_path):
        _, _, ckpt = workspace
        vox = tmp_path / "v.svox"
        save_voxels(sphere_grid(8), vox)
        assert main(["eval", str(vox), str(ckpt)]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_training_is_runtime_failure(self, workspace, tmp_path):
        _, img, _ = workspace
        code = main(["train", str(img), "-o", str(tmp_path / "m"), "--activation", "relu",
                     "--hidden-layers", "1", "--width", "8", "--epochs", "5", "--lr", "1e300"])
        assert code == 1
        assert not (tmp_path / "m").exists()


class TestCommands:
    def test_train_outputs(self, workspace):
        d, img, ckpt = workspace
        rows = read_csv(f"{ckpt}.loss.csv")
        assert rows[0] == ["epoch", "loss"] and len(rows) == 31
        losses = [float(r[1]) for r in rows[1:]]
        assert losses[-1] < losses[0]

    def test_train_deterministic(self, workspace, tmp_path):
        _, img, ckpt = workspace
        again = tmp_path / "again.ckpt"
        assert main(["train", str(img), "-o", str(again), *SMALL]) == 0
        assert again.read_bytes() == ckpt.read_bytes()

    def test_eval_matches_training_psnr(self, workspace, tmp_path):
        _, img, ckpt = workspace
        out = tmp_path / "m.csv"
        assert main(["eval", str(img), str(ckpt), "-o", str(out)]) == 0
        m = metrics(out)
        ref = load_image(img)
        net = decompress_inr(ckpt.read_bytes())
        expected = psnr(ref, render_inr_image(net, ref.width, ref.height))
        assert abs(float(m["psnr_db"]) - expected) < 1e-9
        size = os.path.getsize(ckpt)
        assert int(m["file_bytes"]) == size
        assert float(m["bpp"]) == 8 * size / (32 * 32)

    def test_compress_decompress_roundtrip(self, workspace, tmp_path, capsys):
        _, img, ckpt = workspace
        sinr, back = tmp_path / "m.sinr", tmp_path / "back.ckpt"
        rep = tmp_path / "layers.csv"
        assert main(["compress", str(ckpt), "-o", str(sinr), "--s", "20", "--k2-factor", "2",
                     "--reference", str(img), "--report-csv", str(rep)]) == 0
        out = capsys.readouterr().out
        assert "T_s:" in out and "bpp:" in out
        rows = read_csv(rep)
        assert rows[0][:5] == ["layer", "mode", "k1", "k2", "s"]
        assert [r[1] for r in rows[1:]] == ["RAW", "PER_VECTOR", "PER_VECTOR"]
        assert main(["decompress", str(sinr), "-o", str(back)]) == 0
        a = decompress_inr(sinr.read_bytes())
        b = decompress_inr(back.read_bytes())
        for x, y in zip(a.parameters(), b.parameters()):
            np.testing.assert_allclose(x, y, atol=1e-6)

    def test_sweep_curve(self, workspace, tmp_path):
        _, _, ckpt = workspace
        out = tmp_path / "sweep.csv"
        assert main(["sweep", str(ckpt), "-o", str(out), "--k2-factor", "4"]) == 0
        rows = read_csv(out)
        assert rows[0] == ["layer", "mode", "s", "rel_err", "projected_bytes", "chosen"]
        by_layer = {}
        for r in rows[1:]:
            by_layer.setdefault(r[0], []).append((int(r[2]), float(r[3]), int(r[4])))
        assert set(by_layer) == {"1", "2"}
        for curve in by_layer.values():
            errs = [e for _, e, _ in curve]
            sizes = [b for _, _, b in curve]
            assert errs == sorted(errs, reverse=True)
            assert sizes == sorted(sizes)
        assert sum(int(r[5]) for r in rows[1:]) == 2

    def test_diagnose(self, workspace, tmp_path):
        _, _, ckpt = workspace
        out = tmp_path / "mom.csv"
        assert main(["diagnose", str(ckpt), "-o", str(out)]) == 0
        rows = read_csv(out)
        assert rows[0][0] == "layer" and "excess_kurtosis" in rows[0]
        assert [r[0] for r in rows[1:]] == ["0", "1", "2"]  # one row per layer

    def test_diagnose_untrained_near_uniform(self, tmp_path):
        from sinr.codec import save_checkpoint
        from sinr.inr import Architecture, init_network
        ckpt = tmp_path / "init.ckpt"
        ckpt.write_bytes(save_checkpoint(init_network(Architecture(2, 1, 2, 256), 0)))
        out = tmp_path / "mom.csv"
        assert main(["diagnose", str(ckpt), "-o", str(out)]) == 0
        rows = read_csv(out)
        kurt = {r[0]: float(r[6]) for r in rows[1:]}
        assert kurt["1"] == pytest.approx(-1.2, abs=0.05)

    def test_pipeline_tiny_net_reports_flattened(self, workspace, tmp_path, capsys):
        _, img, _ = workspace
        wd = tmp_path / "run"
        args = ["pipeline", str(img), "-d", str(wd), "--hidden-layers", "2", "--width", "32",
                "--epochs", "20", "--lr", "1e-3", "--rel-tol", "0.3"]
        assert main(args) == 0
        m = metrics(wd / "report.csv")
        assert m["layer1_mode"] == "FLATTENED" and m["layer2_mode"] == "FLATTENED"
        assert int(m["sinr_bytes"]) == os.path.getsize(wd / "model.sinr")
        assert "FLATTENED" in capsys.readouterr().out
        first = (wd / "report.csv").read_bytes()
        assert main(args) == 0
        assert (wd / "report.csv").read_bytes() == first

    def test_occupancy_pipeline_runs(self, tmp_path):
        vox = tmp_path / "s.svox"
        save_voxels(sphere_grid(12), vox)
        wd = tmp_path / "occ"
        assert main(["pipeline", str(vox), "-d", str(wd), "--activation", "gaussian",
                     "--hidden-layers", "1", "--width", "64", "--epochs", "20", "--sigma", "3",
                     "--s", "10", "--k2-factor", "2"]) == 0
        m = metrics(wd / "report.csv")
        assert 0.0 <= float(m["sinr_iou"]) <= 1.0

    def test_gradient_image_fits_with_tiny_net(self, tmp_path):
        g = np.linspace(0, 1, 64)
        img = tmp_path / "grad.pgm"
        save_image(ImageSignal(np.add.outer(g, g)[:, :, None] / 2), img)
        ckpt = tmp_path / "g.ckpt"
        assert main(["train", str(img), "-o", str(ckpt), "--hidden-layers", "2", "--width", "32",
                     "--epochs", "2000"]) == 0
        out = tmp_path / "m.csv"
        assert main(["eval", str(img), str(ckpt), "-o", str(out)]) == 0
        assert float(metrics(out)["psnr_db"]) >= 35.0


def test_console_script_and_thread_cap(workspace, tmp_path):
    _, img, ckpt = workspace
    env = {**os.environ, "SINR_THREADS": "1"}
    proc = subprocess.run([sys.executable, "-m", "sinr.cli", "diagnose", str(ckpt)],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[0].startswith("layer,hidden")
    proc = subprocess.run([sys.executable, "-c",
                           "import sinr, os; print(os.environ['OPENBLAS_NUM_THREADS'])"],
                          capture_output=True, text=True,
                          env={k: v for k, v in env.items() if k != "OPENBLAS_NUM_THREADS"})
    assert proc.stdout.strip() == "1"
