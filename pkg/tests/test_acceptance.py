"""Acceptance suite: one test group per criterion, reported as PASS/FAIL lines at the end of the run.

The long training criteria (6 to 9) run the shipped desk-scale configuration
``configs/desk.json`` through the experiment harness, so they exercise the same
path as the ``regce matrix`` command. They take roughly an hour on one CPU core.
"""
import json
import time
import zlib
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from regce import config as cfgmod
from regce import harness
from regce import tensor as T
from regce.augment import AugPolicy
from regce.data import dumps_dataset, generate_synthetic_dataset, load_cifar_binary, loads_dataset
from regce.models import ModelSpec, build_model, forward
from regce.noise import (
    CIFAR10_CLASSES,
    NoiseSpec,
    NoisyDataset,
    inject,
    inject_asymmetric_cifar10,
    inject_asymmetric_next_class,
)
from regce.schedules import EmaState, LrScheduleSpec, ema_update, lr_at
from regce.semi import guess_labels, mix_lambda, sharpen
from regce.tensor import Tensor, backward
from regce.trainer import MetricsLog, estimate_sharpness, grad_cam

from conftest import check_grads, numeric_grad, rel_err

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.json"
SEEDS = (0, 1, 2)


def criterion(n, title):
    return pytest.mark.criterion(n, title)


def _project(out: Tensor, seed: int = 7) -> Tensor:
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return T.tensor_sum(T.mul(out, Tensor(r)))


# -- 1: gradients -----------------------------------------------------------------
_r = np.random.default_rng(11)
_SOFT = _r.dirichlet(np.ones(4), 5)
_TARGET = _r.uniform(size=(3, 4))
_BN_STATS = (_r.standard_normal(2), _r.uniform(0.5, 2.0, 2))

OP_CASES = {
    "add_broadcast": (lambda a, b: _project(T.add(a, b)), [(3, 4), (4,)]),
    "mul": (lambda a, b: _project(T.mul(a, b)), [(2, 3), (2, 3)]),
    "sub_neg": (lambda a, b: _project(-(a - b)), [(3, 3), (3, 3)]),
    "relu": (lambda a: _project(T.relu(a)), [(4, 5)]),
    "sum": (lambda a: T.tensor_sum(T.mul(a, a)), [(3, 2)]),
    "mean": (lambda a: T.tensor_mean(T.mul(a, a)), [(3, 2)]),
    "matmul": (lambda a, b: _project(T.matmul(a, b)), [(3, 5), (5, 2)]),
    "conv2d_s1p0": (lambda x, w: _project(T.conv2d(x, w, 1, 0)), [(2, 3, 5, 5), (4, 3, 3, 3)]),
    "conv2d_s2p1": (lambda x, w: _project(T.conv2d(x, w, 2, 1)), [(2, 3, 5, 5), (4, 3, 3, 3)]),
    "batchnorm_train": (lambda x, g, b: _project(T.batchnorm2d(x, g, b, None, None, training=True)),
                        [(3, 2, 3, 3), (2,), (2,)]),
    "batchnorm_eval": (lambda x, g, b: _project(T.batchnorm2d(x, g, b, _BN_STATS[0].copy(), _BN_STATS[1].copy(),
                                                              training=False)), [(3, 2, 3, 3), (2,), (2,)]),
    "global_avg_pool": (lambda x: _project(T.global_avg_pool(x)), [(2, 3, 4, 4)]),
    "max_pool2d": (lambda x: _project(T.max_pool2d(x, 2)), [(2, 2, 4, 6)]),
    "reshape": (lambda x: _project(T.reshape(x, (4, 6))), [(6, 4)]),
    "concat": (lambda a, b: _project(T.concat([a, b], axis=0)), [(2, 3), (4, 3)]),
    "take_rows": (lambda x: _project(T.take_rows(x, 1, 4)), [(6, 4)]),
    "softmax_mse": (lambda x: T.mse(T.softmax(x), _TARGET), [(3, 4)]),
    "cross_entropy_hard": (lambda z: T.softmax_cross_entropy(z, [0, 3, 1, 1, 2]), [(5, 4)]),
    "cross_entropy_soft": (lambda z: T.softmax_cross_entropy(z, _SOFT), [(5, 4)]),
}


@criterion(1, "finite-difference gradient checks, rel err < 1e-4, < 2 min")
@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_c1_op_gradient(name):
    build, shapes = OP_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    arrays = [rng.uniform(0.5, 1.5, s) if len(s) == 1 else rng.standard_normal(s) for s in shapes]
    assert check_grads(build, arrays, h=1e-5) < 1e-4


@criterion(1, "finite-difference gradient checks, rel err < 1e-4, < 2 min")
def test_c1_two_block_network(record_property):
    t0 = time.perf_counter()
    spec = ModelSpec(kind="micro_resnet", stages=[[1, 3], [1, 4]], input_shape=[2, 6, 6], num_classes=3)
    model = build_model(spec, np.random.default_rng(1), dtype=np.float64)
    x = np.random.default_rng(2).uniform(size=(2, 2, 6, 6))
    xt = Tensor(x.copy(), requires_grad=True)
    y = [0, 2]

    def loss(inp=x):
        return T.softmax_cross_entropy(forward(model, inp)[0], y)

    model.zero_grad()
    backward(loss(xt))
    params = model.parameters()
    analytic = np.concatenate([p.grad.ravel() for p in params] + [xt.grad.ravel()])
    numeric = np.concatenate([numeric_grad(lambda: loss().item(), p.data).ravel() for p in params]
                             + [numeric_grad(lambda: loss().item(), x).ravel()])
    err = rel_err(analytic, numeric)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"network rel err {err:.1e} over {analytic.size} entries in {elapsed:.1f}s")
    assert err < 1e-4
    assert elapsed < 120


# -- 2: noise ----------------------------------------------------------------------
def _labels_ds(labels, k=10):
    labels = np.asarray(labels)
    return NoisyDataset.clean(np.zeros((len(labels), 1, 1, 1), np.float32), labels, k)


@criterion(2, "noise injection exact counts, asymmetric map, next-class wrap")
@pytest.mark.parametrize("rate", [0.2, 0.4, 0.6, 0.8])
def test_c2_exact_corruption_count(rate):
    ds = _labels_ds(np.arange(1000) % 10)
    for kind in ("symmetric", "asymmetric_next_class"):
        out = inject(ds, NoiseSpec(kind, rate, seed=3))
        assert int(out.corruption_mask.sum()) == int(np.floor(rate * 1000))
        assert np.array_equal(out.corruption_mask, out.noisy_labels != out.true_labels)


@criterion(2, "noise injection exact counts, asymmetric map, next-class wrap")
def test_c2_asymmetric_map_exhaustive():
    expected = {"truck": "automobile", "bird": "airplane", "deer": "horse", "cat": "dog", "dog": "cat"}
    for k, name in enumerate(CIFAR10_CLASSES):
        out = inject_asymmetric_cifar10(_labels_ds(np.full(20, k)), rate=1.0)
        assert set(out.noisy_labels.tolist()) == {CIFAR10_CLASSES.index(expected.get(name, name))}


@criterion(2, "noise injection exact counts, asymmetric map, next-class wrap")
def test_c2_next_class_wraps():
    out = inject_asymmetric_next_class(_labels_ds(np.arange(10)), rate=1.0)
    assert out.noisy_labels.tolist() == [1, 2, 3, 4, 5, 6, 7, 8, 9, 0]


# -- 3: schedules ------------------------------------------------------------------
@criterion(3, "sharp, cosine and constant schedules exact")
def test_c3_schedules():
    spec = LrScheduleSpec(kind="sharp", initial_lr=0.1, second_decay_gap=20)
    lrs = [lr_at(spec, 50, e) for e in range(120)]
    assert lrs[:50] == [0.1] * 50
    assert lrs[50:70] == [0.001] * 20
    assert lrs[70:] == [0.00001] * 50
    assert set(lrs) == {0.1, 0.001, 0.00001}
    cos = LrScheduleSpec(kind="cosine", initial_lr=0.1, total_epochs=200)
    assert lr_at(cos, None, 0) == 0.1 and abs(lr_at(cos, None, 200)) < 1e-15
    assert {lr_at(LrScheduleSpec(kind="constant"), None, e) for e in range(200)} == {0.1}


# -- 4: EMA ------------------------------------------------------------------------
@criterion(4, "EMA closed form within 1e-12")
@pytest.mark.parametrize("m", [0.0, 0.9, 0.999])
@pytest.mark.parametrize("k", [1, 10, 1000])
def test_c4_ema_closed_form(tiny_model, m, k):
    s0 = {n: p.data.astype(np.float64) for n, p in tiny_model.params.items()}
    state = EmaState.from_model(tiny_model, m)
    r = np.random.default_rng(k)
    for p in tiny_model.params.values():
        p.data = r.standard_normal(p.shape).astype(p.dtype)
    for _ in range(k):
        ema_update(tiny_model, state)
    for n, p in tiny_model.params.items():
        w = p.data.astype(np.float64)
        assert np.max(np.abs(state.shadow[n] - (w + (s0[n] - w) * m**k))) < 1e-12


# -- 5: MixMatch algebra -----------------------------------------------------------
@criterion(5, "MixMatch algebra")
def test_c5_mixmatch_algebra(tiny_model):
    r = np.random.default_rng(0)
    p = r.dirichlet(np.ones(5), 8)
    assert np.max(np.abs(sharpen(p, 1.0) - p)) < 1e-12
    assert np.max(np.abs(sharpen([0.6, 0.4], 0.5) - [9 / 13, 4 / 13])) < 1e-12
    assert min(mix_lambda(0.75, r) for _ in range(100_000)) >= 0.5
    views = [r.uniform(size=(16, 3, 8, 8)).astype(np.float32) for _ in range(2)]
    q = guess_labels(tiny_model, views, 0.5)
    assert np.max(np.abs(q.sum(axis=1) - 1.0)) < 1e-12


# -- 6: memorization ---------------------------------------------------------------
@pytest.fixture(scope="session")
def memorization_runs(tmp_path_factory):
    cfg = cfgmod.load(DESK)
    cfg.train = replace(
        cfg.train,
        noise=NoiseSpec("symmetric", 0.6),
        schedule=LrScheduleSpec(kind="constant", initial_lr=0.1, total_epochs=40),
        weak=AugPolicy(kind="none"),
        strong=AugPolicy(kind="none"),
        epochs=40,
    )
    cfg.matrix = cfgmod.MatrixSpec(seeds=list(SEEDS))
    out = tmp_path_factory.mktemp("memorization")
    t0 = time.perf_counter()
    harness.run_experiment_matrix(cfg, out)
    elapsed = time.perf_counter() - t0
    logs = {s: MetricsLog.read(next(out.glob(f"*-seed{s}")) / "metrics.jsonl") for s in SEEDS}
    return logs, elapsed


@pytest.mark.slow
@criterion(6, "memorization: clean loss < noisy loss in >= 80% of the first 40 epochs, 3/3 seeds, < 15 min")
def test_c6_memorization(memorization_runs, record_property):
    logs, elapsed = memorization_runs
    fractions = []
    for s in SEEDS:
        clean = np.array(logs[s].column("loss_clean")[:40])
        noisy = np.array(logs[s].column("loss_noisy")[:40])
        assert len(clean) == 40
        fractions.append(float(np.mean(clean < noisy)))
    record_property("detail", f"fractions {fractions}, {elapsed / 60:.1f} min")
    assert all(f >= 0.8 for f in fractions)
    assert elapsed < 15 * 60


# -- 7: ablation -------------------------------------------------------------------
@pytest.fixture(scope="session")
def ablation(tmp_path_factory):
    cfg = cfgmod.load(DESK)
    out = tmp_path_factory.mktemp("ablation")
    t0 = time.perf_counter()
    rows = harness.run_experiment_matrix(cfg, out)
    elapsed = time.perf_counter() - t0
    return {(r["lr_on"], r["aug_on"], r["ema_on"]): r for r in rows}, elapsed


@pytest.mark.slow
@criterion(7, "ablation: all-on best, all-off worst, gap >= 5 points, < 90 min")
def test_c7_ablation_ordering(ablation, record_property):
    cells, elapsed = ablation
    assert len(cells) == 8 and all(r["seed_count"] == len(SEEDS) for r in cells.values())
    means = {key: r["acc_mean"] for key, r in cells.items()}
    table = ", ".join(f"{''.join(map(str, k))}={v:.3f}" for k, v in sorted(means.items()))
    record_property("detail", f"lr/aug/ema means {table}; {elapsed / 60:.1f} min")
    on, off = means[(1, 1, 1)], means[(0, 0, 0)]
    assert on == max(means.values())
    assert off == min(means.values())
    assert on - off >= 0.05
    assert elapsed < 90 * 60


# -- 8 and 9: semi-supervised stage --------------------------------------------------
@pytest.fixture(scope="session")
def semi_runs(tmp_path_factory):
    cfg = cfgmod.load(DESK)
    cfg.matrix = cfgmod.MatrixSpec(seeds=list(SEEDS), semi=[True])
    out = tmp_path_factory.mktemp("semi")
    t0 = time.perf_counter()
    rows = harness.run_experiment_matrix(cfg, out)
    elapsed = time.perf_counter() - t0
    logs = {s: MetricsLog.read(next(out.glob(f"*-seed{s}")) / "metrics.jsonl") for s in SEEDS}
    return rows[0], logs, elapsed


@pytest.mark.slow
@criterion(8, "confident split precision > 0.6 at every SSL epoch, 3/3 seeds")
def test_c8_split_precision(semi_runs, record_property):
    _, logs, _ = semi_runs
    worst = {}
    for s in SEEDS:
        ssl = [r for r in logs[s].records if r.get("phase") == "ssl"]
        assert ssl, "no SSL epochs recorded"
        worst[s] = min(r["split_precision"] for r in ssl)
    record_property("detail", "min precision per seed " + ", ".join(f"{s}: {v:.3f}" for s, v in worst.items()))
    assert all(v > 0.6 for v in worst.values())


@pytest.mark.slow
@criterion(9, "semi-supervised mean >= supervised mean over 3 seeds, < 45 min")
def test_c9_semi_not_worse(semi_runs, ablation, record_property):
    row, _, elapsed = semi_runs
    baseline = ablation[0][(1, 1, 1)]
    assert row["seed_count"] == len(SEEDS) == baseline["seed_count"]
    record_property("detail", f"semi {row['acc_mean']:.3f} vs supervised {baseline['acc_mean']:.3f}; "
                              f"{elapsed / 60:.1f} min")
    assert row["acc_mean"] >= baseline["acc_mean"]
    assert elapsed < 45 * 60


# -- 10: determinism and formats -----------------------------------------------------
TINY = {
    "dataset": {"synthetic": {"num_classes": 4, "n_train": 48, "n_test": 24, "height": 8, "width": 8}},
    "train": {
        "model": {"stages": [[1, 4]], "input_shape": [3, 8, 8], "num_classes": 4},
        "noise": {"kind": "symmetric", "rate": 0.25},
        "schedule": {"initial_lr": 0.05, "second_decay_gap": 1, "plateau": {"patience": 1}},
        "batch_size": 16,
        "epochs": 3,
    },
}


@criterion(10, "bit-identical reruns, container and CIFAR round-trips, strict parser")
@pytest.mark.parametrize("semi", [False, True])
def test_c10_rerun_bit_identical(tmp_path, semi):
    cfg = cfgmod.parse(json.dumps({**TINY, "mixmatch": {"ssl_epochs": 1}}))
    harness.run_single(cfg, tmp_path / "a", semi)
    harness.run_single(cfgmod.parse(json.dumps({**TINY, "mixmatch": {"ssl_epochs": 1}})), tmp_path / "b", semi)
    for name in ("metrics.jsonl", "summary.json", "final_online.ckpt", "final_ema.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@criterion(10, "bit-identical reruns, container and CIFAR round-trips, strict parser")
def test_c10_formats(tmp_path):
    train, _ = generate_synthetic_dataset(cfgmod.parse(json.dumps(TINY)).dataset.synthetic)
    noisy = inject(train, NoiseSpec("symmetric", 0.5, seed=1))
    blob = dumps_dataset(noisy)
    back = loads_dataset(blob)
    assert back.images.tobytes() == noisy.images.tobytes() and dumps_dataset(back) == blob
    pixels = np.random.default_rng(0).integers(0, 256, size=(2, 3, 32, 32), dtype=np.uint8)
    path = tmp_path / "batch.bin"
    path.write_bytes(bytes([6]) + pixels[0].tobytes() + bytes([2]) + pixels[1].tobytes())
    ds = load_cifar_binary(path)
    assert ds.true_labels.tolist() == [6, 2]
    assert np.array_equal(np.rint(ds.images * 255).astype(np.uint8), pixels)
    assert dumps_dataset(loads_dataset(dumps_dataset(ds))) == dumps_dataset(ds)
    with pytest.raises(cfgmod.ConfigError, match="train.epochz"):
        cfgmod.parse('{"train": {"epochz": 3}}')


# -- 11: diagnostics ---------------------------------------------------------------
class _Quadratic:
    def __init__(self, theta):
        self.theta = Tensor(theta)

    def parameters(self):
        return [self.theta]


@criterion(11, "sharpness toy within 10%, Grad-CAM in [0,1] and shift-invariant")
def test_c11_sharpness_toy(record_property):
    theta = np.random.default_rng(4).standard_normal(30)
    toy = _Quadratic(theta / np.linalg.norm(theta) * 2.0)
    loss = lambda model, _: 0.5 * float(np.sum(model.theta.data**2))  # noqa: E731
    # perturbations of relative size eps along unit directions: L(theta + eps|theta| d) - L = eps^2 |theta|^2 / 2
    # on average, so the proxy divided by eps^2 recovers |theta|^2 / 2 = 2
    est = estimate_sharpness(toy, loss, None, 1e-2, 64, np.random.default_rng(0))
    record_property("detail", f"sharpness {est:.4f} vs 2.0")
    assert abs(est - 2.0) / 2.0 < 0.10


@criterion(11, "sharpness toy within 10%, Grad-CAM in [0,1] and shift-invariant")
def test_c11_grad_cam(tiny_model_spec):
    model = build_model(tiny_model_spec, np.random.default_rng(2), dtype=np.float64)
    model.train()
    forward(model, np.random.default_rng(3).uniform(size=(8, 3, 8, 8)))
    model.eval()
    images = np.random.default_rng(5).uniform(size=(4, 3, 8, 8))
    before = [grad_cam(model, img, c) for img in images for c in range(4)]
    assert all(cam.min() >= 0 and cam.max() <= 1 for cam in before)
    model.params["head.bias"].data += 3.25
    after = [grad_cam(model, img, c) for img in images for c in range(4)]
    assert all(np.array_equal(a, b) for a, b in zip(before, after))
