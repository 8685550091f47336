import numpy as np
import pytest

from regce.data import SyntheticSpec, generate_synthetic_dataset
from regce.models import ModelSpec, build_model
from regce.tensor import Tensor, backward


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f with respect to array x (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-7) -> float:
    """Max abs difference over the larger max magnitude.

    The floor keeps analytically-zero gradients (a bias feeding batchnorm)
    from turning finite-difference roundoff into a huge ratio.
    """
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def check_grads(build, arrays: list[np.ndarray], h: float = 1e-5) -> float:
    """Worst relative error between backprop and finite differences over all inputs.

    ``build(*tensors)`` must return a scalar Tensor.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    backward(build(*tensors))
    worst = 0.0
    for t, a in zip(tensors, arrays):
        def f():
            return float(build(*[Tensor(x) for x in arrays]).data)
        worst = max(worst, rel_err(t.grad, numeric_grad(f, a, h)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data():
    spec = SyntheticSpec(num_classes=4, n_train=64, n_test=32, height=8, width=8, seed=3)
    return generate_synthetic_dataset(spec)


@pytest.fixture
def tiny_model_spec():
    return ModelSpec(kind="micro_resnet", stages=[[1, 4], [1, 8]], input_shape=[3, 8, 8], num_classes=4)


@pytest.fixture
def tiny_model(tiny_model_spec):
    return build_model(tiny_model_spec, np.random.default_rng(0))


@pytest.fixture
def tiny_config(tiny_model_spec):
    from regce.noise import NoiseSpec
    from regce.schedules import LrScheduleSpec, PlateauSpec
    from regce.trainer import EmaSpec, TrainConfig

    return TrainConfig(
        model=tiny_model_spec,
        noise=NoiseSpec("symmetric", 0.25, seed=0),
        schedule=LrScheduleSpec(kind="sharp", initial_lr=0.05, second_decay_gap=1,
                                plateau=PlateauSpec(patience=1, max_trigger_epoch=2)),
        ema=EmaSpec(momentum=0.9),
        batch_size=16,
        epochs=3,
        seed=0,
    )


@pytest.fixture
def tiny_noisy(tiny_data):
    from regce.noise import NoiseSpec, inject

    train, test = tiny_data
    return inject(train, NoiseSpec("symmetric", 0.25, seed=0)), test


# -- acceptance reporting ---------------------------------------------------------
_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test establishes")
    config.stash[_CRITERIA] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    rep = outcome.get_result()
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    n, title = marker.args
    entry = item.config.stash[_CRITERIA].setdefault(n, {"title": title, "ok": True, "detail": []})
    entry["ok"] = entry["ok"] and rep.passed
    entry["detail"] += [str(v) for k, v in item.user_properties if k == "detail"]
    item.user_properties[:] = [(k, v) for k, v in item.user_properties if k != "detail"]


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        r = results[n]
        detail = "; ".join(r["detail"])
        line = f"{'PASS' if r['ok'] else 'FAIL'} criterion {n}: {r['title']}"
        terminalreporter.write_line(f"{line} [{detail}]" if detail else line)
