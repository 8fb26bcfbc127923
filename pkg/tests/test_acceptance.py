"""End-to-end acceptance suite.

Each test prints one ``PASS``/``FAIL`` line for its criterion; the lines are
repeated together in the pytest terminal summary.  Criteria 6-11 train real
networks and are marked ``slow``.
"""
import hashlib
import subprocess
import sys
import time

import numpy as np
import pytest

from sinr.cli import main as cli_main
from sinr.codec import (
    CodecConfig, baseline_bytes, compress_inr, decompress_inr, dequantize, quantize,
)
from sinr.inr import (
    Activation, ActivationKind, Architecture, TrainConfig, init_network, loss_and_grads,
    forward, train, weight_gaussianity,
)
from sinr.signals import (
    iou, procedural_image, psnr, render_inr_image, render_inr_occupancy, save_image, sphere_grid,
)
from sinr.sparse_coding import choose_k2, layer_seed, omp, parameter_counts
from sinr.tensor_core import sample_dictionary

# Desk-scale image task shared by criteria 6, 10 and 11.
IMAGE_SIZE = 256
IMAGE_CUTOFF = 0.15
IMAGE_EPOCHS = 175
IMAGE_LR = 5e-4


# ---------------------------------------------------------------------------
# 1-5: fast structural checks


def test_c01_omp_planted_recovery(criterion):
    start = time.perf_counter()
    exact = 0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        D = sample_dictionary(1000 + trial, 64, 128)
        support = np.sort(rng.choice(128, size=8, replace=False))
        coef = rng.standard_normal(8)
        w = D.atoms[:, support] @ coef
        code = omp(D, w, 8)
        rel = np.linalg.norm(code.values - coef) / np.linalg.norm(coef)
        exact += bool(np.array_equal(code.indices, support) and rel < 1e-6)
    elapsed = time.perf_counter() - start
    ok = criterion(1, exact >= 95 and elapsed < 5.0,
                   f"planted OMP exact recoveries {exact}/100 (need >= 95), {elapsed:.2f}s (< 5s)")
    assert ok


def _planted_layer_net(master_seed: int):
    arch = Architecture(2, 1, 1, 64)
    net = init_network(arch, 0)
    rng = np.random.default_rng(7)
    D = sample_dictionary(layer_seed(master_seed, 1), 64, choose_k2(64, 2.0))
    cols = []
    for _ in range(64):
        x = np.zeros(D.k2)
        x[rng.choice(D.k2, 6, replace=False)] = rng.standard_normal(6) * 0.1
        cols.append(D.atoms @ x)
    net.weights[1] = np.column_stack(cols)
    return net


def test_c02_seeded_dictionary_decode_identity(criterion, tmp_path):
    master = 0xC0FFEE
    net = _planted_layer_net(master)
    cfg = CodecConfig(s=6, k2_factor=2.0, lossless=True, master_seed=master)
    data, _ = compress_inr(net, cfg)
    path = tmp_path / "planted.sinr"
    path.write_bytes(data)
    out = tmp_path / "decoded.npy"
    # the decoding process gets nothing but the file
    code = ("import sys, numpy as np; from sinr.codec import decompress_inr;"
            "net = decompress_inr(open(sys.argv[1], 'rb').read());"
            "np.save(sys.argv[2], net.weights[1])")
    subprocess.run([sys.executable, "-c", code, str(path), str(out)], check=True)
    W = np.load(out)
    ref = net.weights[1]
    rel = np.linalg.norm(W - ref, axis=0) / np.linalg.norm(ref, axis=0)
    ok = criterion(2, rel.max() <= 1e-6,
                   f"fresh-process decode of planted w = Ax, max rel err {rel.max():.2e} (<= 1e-6)")
    assert ok


def test_c03_parameter_count_formulas(criterion):
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(10):
        a, b = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        l, k = int(rng.integers(0, 9)), int(rng.integers(2, 513))
        s = int(rng.integers(1, (k + 1) // 2 + 1))
        expected_T_s = a * k + l * k * k + b * k
        expected_T_sinr = a * 2 * s + k * l * 2 * s + b * 2 * s
        got = parameter_counts(a, b, l, k, s)
        mismatches += got != {"T_s": expected_T_s, "T_sinr": expected_T_sinr}
    ok = criterion(3, mismatches == 0,
                   f"parameter_counts vs hand formulas on 10 random architectures, "
                   f"{mismatches} mismatches")
    assert ok


def test_c04_quantizer_bound(criterion):
    rng = np.random.default_rng(4)
    violations = 0
    ranges = [(-1.0, 1.0), (0.0, 1e-6), (-1e4, 3e4), (5.0, 5.5), (-1e-3, 0.0)]
    for lo, hi in ranges:
        v = rng.uniform(lo, hi, 100_000)
        q = quantize(v, 16)
        err = np.abs(dequantize(q) - v)
        violations += int(np.count_nonzero(err > (q.vmax - q.vmin) / 65535))
    ok = criterion(4, violations == 0,
                   f"16-bit round trip over {len(ranges)} ranges x 1e5 values, "
                   f"{violations} bound violations")
    assert ok


def test_c05_gradient_check(criterion):
    arch = Architecture(2, 1, 1, 8, Activation(ActivationKind.SINE))
    net = init_network(arch, 5)
    rng = np.random.default_rng(5)
    net.biases = [rng.standard_normal(b.shape) * 0.1 for b in net.biases]
    X = rng.uniform(-1, 1, (32, 2))
    T = rng.uniform(0, 1, (32, 1))

    def loss():
        d = forward(net, X) - T
        return float(np.mean(d * d))

    _, gW, gb = loss_and_grads(net, X, T)
    eps, worst, n = 1e-4, 0.0, 0
    for grads, params in ((gW, net.weights), (gb, net.biases)):
        for g, p in zip(grads, params):
            for idx in np.ndindex(p.shape):
                orig = p[idx]
                p[idx] = orig + eps
                up = loss()
                p[idx] = orig - eps
                down = loss()
                p[idx] = orig
                fd = (up - down) / (2 * eps)
                worst = max(worst, abs(g[idx] - fd) / max(1.0, abs(g[idx])))
                n += 1
    ok = criterion(5, worst <= 1e-3,
                   f"2->8->8->1 Sine net, {n} parameters, worst rel gradient error {worst:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 6, 10, 11: the desk-scale image INR


@pytest.fixture(scope="module")
def image_run():
    start = time.perf_counter()
    img = procedural_image(IMAGE_SIZE, seed=0, noise_cutoff=IMAGE_CUTOFF)
    arch = Architecture(2, 1, 3, 128, Activation(ActivationKind.SINE))
    cfg = TrainConfig(epochs=IMAGE_EPOCHS, learning_rate=IMAGE_LR, seed=0, dtype="float32")
    net, _ = train(init_network(arch, cfg.seed), img.coords(), img.targets(), cfg)
    trained = time.perf_counter()
    data, report = compress_inr(net, CodecConfig(rel_tol=0.02))
    base = baseline_bytes(net)
    decoded = decompress_inr(data)
    before = psnr(img, render_inr_image(net, IMAGE_SIZE, IMAGE_SIZE))
    after = psnr(img, render_inr_image(decoded, IMAGE_SIZE, IMAGE_SIZE))
    done = time.perf_counter()
    return dict(img=img, net=net, data=data, report=report, base=base, before=before,
                after=after, train_s=trained - start, total_s=done - start)


@pytest.mark.slow
def test_c06_image_pipeline(criterion, image_run):
    r = image_run
    ratio = len(r["data"]) / len(r["base"])
    drop = r["before"] - r["after"]
    s_used = [lr.s for lr in r["report"].layers if lr.mode != "RAW"]
    ok = (r["before"] >= 30.0 and ratio <= 0.85 and drop <= 0.5 and r["total_s"] < 15 * 60)
    criterion(6, ok,
              f"3x128 Sine on 256^2: {r['before']:.2f} dB (>= 30), sinr/baseline "
              f"{len(r['data'])}/{len(r['base'])} = {ratio:.3f} (<= 0.85), drop {drop:.3f} dB "
              f"(<= 0.5), s={s_used}, {r['total_s']:.0f}s (< 900s)")
    assert ok


@pytest.mark.slow
def test_c10_gaussianity(criterion, image_run):
    hidden = [m for m in weight_gaussianity(image_run["net"]) if m.hidden]
    worst_skew = max(abs(m.skewness) for m in hidden)
    worst_kurt = max(abs(m.excess_kurtosis) for m in hidden)
    ok = len(hidden) == 3 and worst_skew < 0.5 and worst_kurt < 1.0
    detail = ", ".join(f"L{m.layer} skew {m.skewness:+.3f} kurt {m.excess_kurtosis:+.3f}"
                       for m in hidden)
    criterion(10, ok, f"hidden layers of the criterion-6 net: {detail} "
                      "(|skew| < 0.5, |kurt| < 1)")
    assert ok


@pytest.mark.slow
def test_c11_bit_exact_reproducibility(criterion, image_run, tmp_path):
    # the criterion-6 net compressed a second time
    again, _ = compress_inr(image_run["net"], CodecConfig(rel_tol=0.02))
    h1 = hashlib.sha256(image_run["data"]).hexdigest()
    h2 = hashlib.sha256(again).hexdigest()
    # and two complete CLI pipelines (train -> compress) from scratch
    img_path = tmp_path / "img.pgm"
    save_image(procedural_image(64, seed=11, noise_cutoff=0.3), img_path)
    hashes = []
    for run in ("a", "b"):
        wd = tmp_path / run
        code = cli_main(["pipeline", str(img_path), "-d", str(wd), "--hidden-layers", "3",
                         "--width", "128", "--epochs", "40", "--lr", "5e-4", "--seed", "3",
                         "--master-seed", "99"])
        assert code == 0
        hashes.append(hashlib.sha256((wd / "model.sinr").read_bytes()).hexdigest())
    ok = h1 == h2 and hashes[0] == hashes[1]
    criterion(11, ok, f"re-compress sha256 {h1[:12]}=={h2[:12]}, two pipeline runs "
                      f"{hashes[0][:12]}=={hashes[1][:12]}")
    assert ok


# ---------------------------------------------------------------------------
# 7: tiny INR, flattened path

TINY_SIZE = 128
TINY_CUTOFF = 0.3
TINY_EPOCHS = 1000
TINY_LR = 1e-4


@pytest.mark.slow
def test_c07_tiny_inr_flattened(criterion):
    img = procedural_image(TINY_SIZE, seed=0, noise_cutoff=TINY_CUTOFF)
    arch = Architecture(2, 1, 2, 32, Activation(ActivationKind.SINE))
    cfg = TrainConfig(epochs=TINY_EPOCHS, learning_rate=TINY_LR, dtype="float32")
    net, _ = train(init_network(arch, 0), img.coords(), img.targets(), cfg)
    data, report = compress_inr(net, CodecConfig(rel_tol=0.02))
    base = baseline_bytes(net)
    before = psnr(img, render_inr_image(net, TINY_SIZE, TINY_SIZE))
    after = psnr(img, render_inr_image(decompress_inr(data), TINY_SIZE, TINY_SIZE))
    hidden = report.layers[1:3]
    flattened = all(lr.mode == "FLATTENED" and lr.k1 == 1024 for lr in hidden)
    budget = all(2 * lr.s < 1024 for lr in hidden)
    ratio, drop = len(data) / len(base), before - after
    ok = flattened and budget and before >= 30.0 and ratio <= 0.95 and drop <= 0.5
    criterion(7, ok,
              f"2x32 net: hidden modes {[lr.mode for lr in hidden]} k1={[lr.k1 for lr in hidden]}"
              f" s={[lr.s for lr in hidden]}, {before:.2f} dB (>= 30), ratio {ratio:.3f} "
              f"(<= 0.95), drop {drop:.3f} dB (<= 0.5)")
    assert ok


# ---------------------------------------------------------------------------
# 8: sparsity transfers across images, not across widths

TRANSFER_SIZE = 128
TRANSFER_EPOCHS = 150
TRANSFER_LR = 5e-4


def _hidden_s(width: int, image_seed: int) -> list[int]:
    img = procedural_image(TRANSFER_SIZE, seed=image_seed, noise_cutoff=0.3)
    arch = Architecture(2, 1, 3, width, Activation(ActivationKind.SINE))
    cfg = TrainConfig(epochs=TRANSFER_EPOCHS, learning_rate=TRANSFER_LR, dtype="float32")
    net, _ = train(init_network(arch, 0), img.coords(), img.targets(), cfg)
    _, report = compress_inr(net, CodecConfig(rel_tol=0.02))
    return [lr.s for lr in report.layers if 0 < lr.index <= arch.hidden_layers]


def _rel_gap(a: int, b: int) -> float:
    return abs(a - b) / max(a, b)


@pytest.mark.slow
def test_c08_sparsity_transfer(criterion):
    s128 = {seed: _hidden_s(128, seed) for seed in (1, 2, 3)}
    s64 = _hidden_s(64, 1)
    # per hidden layer, compare the s chosen on different images
    same_width = max(_rel_gap(s128[x][i], s128[y][i])
                     for x, y in ((1, 2), (1, 3), (2, 3)) for i in range(3))
    across = min(_rel_gap(s128[1][i], s64[i]) for i in range(3))
    ok = same_width <= 0.10 and across > 0.25
    criterion(8, ok, f"m=128 s per image {list(s128.values())}, max pairwise gap "
                     f"{same_width:.1%} (<= 10%); m=64 s {s64}, min gap vs m=128 "
                     f"{across:.1%} (> 25%)")
    assert ok


# ---------------------------------------------------------------------------
# 9: occupancy field

OCC_N = 64
OCC_SIGMA = 4.0
OCC_EPOCHS = 125
OCC_LR = 5e-3


@pytest.mark.slow
def test_c09_occupancy(criterion):
    grid = sphere_grid(OCC_N, radius=0.6)
    arch = Architecture(3, 1, 3, 128, Activation(ActivationKind.GAUSSIAN, sigma=OCC_SIGMA))
    cfg = TrainConfig(epochs=OCC_EPOCHS, learning_rate=OCC_LR, dtype="float32")
    net, _ = train(init_network(arch, 0), grid.coords(), grid.targets(), cfg)
    data, _ = compress_inr(net, CodecConfig(rel_tol=0.02))
    base = baseline_bytes(net)
    before = iou(grid, render_inr_occupancy(net, grid.dims))
    after = iou(grid, render_inr_occupancy(decompress_inr(data), grid.dims))
    ok = before >= 0.97 and before - after <= 0.02 and len(data) < len(base)
    criterion(9, ok, f"Gaussian 3x128 on 64^3 sphere: IoU {before:.4f} (>= 0.97), after "
                     f"{after:.4f} (drop <= 0.02), bytes {len(data)} < baseline {len(base)}")
    assert ok
