"""Desk-scale classifiers: a micro residual network and an MLP."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .tensor import (
    ShapeError,
    Tensor,
    add,
    batchnorm2d,
    conv2d,
    global_avg_pool,
    matmul,
    max_pool2d,
    relu,
    reshape,
)


@dataclass
class ModelSpec:
    kind: str = "micro_resnet"
    stages: list = field(default_factory=lambda: [[1, 8], [1, 16]])
    input_shape: list = field(default_factory=lambda: [3, 16, 16])
    num_classes: int = 10
    use_batchnorm: bool = True
    stem_pool: bool = True

    def validate(self) -> None:
        if self.kind not in ("micro_resnet", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be C×H×W with positive extents, got {self.input_shape}")
        if not self.stages and self.kind == "micro_resnet":
            raise ValueError("micro_resnet needs at least one stage")
        for blocks, width in self.stages:
            if blocks < 1 or width < 1:
                raise ValueError(f"zero-sized layer in stages {self.stages}")


class Model:
    """Named parameters and buffers plus a forward pass.

    Parameters live in ``self.params`` (insertion order is the canonical
    order) and batchnorm running statistics in ``self.buffers``.
    """

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = True

    # -- bookkeeping ----------------------------------------------------------
    def _param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value.astype(self.dtype), requires_grad=True)

    def _bn(self, name: str, width: int) -> None:
        self._param(f"{name}.weight", np.ones(width))
        self._param(f"{name}.bias", np.zeros(width))
        self.buffers[f"{name}.running_mean"] = np.zeros(width, dtype=self.dtype)
        self.buffers[f"{name}.running_var"] = np.ones(width, dtype=self.dtype)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.params.items()}
        state.update({k: b.copy() for k, b in self.buffers.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers)
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: shape {state[k].shape} does not match {p.shape}")
            p.data = state[k].astype(self.dtype, copy=True)
        for k in self.buffers:
            self.buffers[k] = state[k].astype(self.dtype, copy=True)

    def clone(self) -> "Model":
        other = copy.copy(self)
        other.params = {k: Tensor(p.data.copy(), requires_grad=True) for k, p in self.params.items()}
        other.buffers = {k: b.copy() for k, b in self.buffers.items()}
        return other

    def save(self, path) -> None:
        checkpoint.save(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(checkpoint.load(path))

    # -- layers ---------------------------------------------------------------
    def _batchnorm(self, name: str, x: Tensor) -> Tensor:
        return batchnorm2d(
            x,
            self.params[f"{name}.weight"],
            self.params[f"{name}.bias"],
            self.buffers[f"{name}.running_mean"],
            self.buffers[f"{name}.running_var"],
            training=self.training,
        )

    def _conv_unit(self, name: str, x: Tensor, stride: int, padding: int) -> Tensor:
        out = conv2d(x, self.params[f"{name}.weight"], stride=stride, padding=padding)
        if self.spec.use_batchnorm:
            return self._batchnorm(f"{name}.bn", out)
        return add(out, self.params[f"{name}.bias"])

    def _linear(self, name: str, x: Tensor) -> Tensor:
        return add(matmul(x, self.params[f"{name}.weight"]), self.params[f"{name}.bias"])

    def __call__(self, x, capture_features: bool = False):
        return forward(self, x, capture_features)


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _resnet_layout(spec: ModelSpec):
    """Yield (name, in_width, out_width, stride) for every residual block."""
    width = spec.stages[0][1]
    for si, (blocks, out_w) in enumerate(spec.stages):
        for bi in range(blocks):
            stride = 2 if si > 0 and bi == 0 else 1
            yield f"stage{si}.block{bi}", width, out_w, stride
            width = out_w


def build_model(spec: ModelSpec, rng: np.random.Generator, dtype=np.float32) -> Model:
    spec.validate()
    model = Model(spec, dtype)
    c, h, w = spec.input_shape
    k = spec.num_classes

    def conv_unit(name, cin, cout, ksize):
        model._param(f"{name}.weight", _he(rng, (cout, cin, ksize, ksize), cin * ksize * ksize))
        if spec.use_batchnorm:
            model._bn(f"{name}.bn", cout)
        else:
            model._param(f"{name}.bias", np.zeros((1, cout, 1, 1)))

    if spec.kind == "micro_resnet":
        stem_w = spec.stages[0][1]
        conv_unit("stem", c, stem_w, 3)
        for name, cin, cout, stride in _resnet_layout(spec):
            conv_unit(f"{name}.conv1", cin, cout, 3)
            conv_unit(f"{name}.conv2", cout, cout, 3)
            if cin != cout or stride != 1:
                conv_unit(f"{name}.shortcut", cin, cout, 1)
        feat = spec.stages[-1][1]
    else:
        feat = c * h * w
        for si, (blocks, width) in enumerate(spec.stages):
            for bi in range(blocks):
                name = f"hidden{si}.{bi}"
                model._param(f"{name}.weight", _he(rng, (feat, width), feat))
                model._param(f"{name}.bias", np.zeros(width))
                if spec.use_batchnorm:
                    model._bn(f"{name}.bn", width)
                feat = width
    model._param("head.weight", _he(rng, (feat, k), feat))
    model._param("head.bias", np.zeros(k))
    return model


def forward(model: Model, batch, capture_features: bool = False):
    """Return ``(logits, features)``; features are the last-stage maps or None."""
    spec = model.spec
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=model.dtype))
    if x.ndim != 4 or list(x.shape[1:]) != list(spec.input_shape):
        raise ShapeError(f"forward: batch shape {x.shape} does not match input {tuple(spec.input_shape)}")
    feats = None
    if spec.kind == "micro_resnet":
        out = relu(model._conv_unit("stem", x, 1, 1))
        if spec.stem_pool and min(out.shape[2:]) >= 2:
            out = max_pool2d(out, 2)
        for name, cin, cout, stride in _resnet_layout(spec):
            y = relu(model._conv_unit(f"{name}.conv1", out, stride, 1))
            y = model._conv_unit(f"{name}.conv2", y, 1, 1)
            short = out
            if f"{name}.shortcut.weight" in model.params:
                short = model._conv_unit(f"{name}.shortcut", out, stride, 0)
            out = relu(add(y, short))
        feats = out
        pooled = global_avg_pool(out)
    else:
        pooled = reshape(x, (x.shape[0], -1))
        for si, (blocks, width) in enumerate(spec.stages):
            for bi in range(blocks):
                name = f"hidden{si}.{bi}"
                pooled = model._linear(name, pooled)
                if spec.use_batchnorm:
                    pooled = reshape(model._batchnorm(f"{name}.bn", reshape(pooled, (-1, width, 1, 1))), (-1, width))
                pooled = relu(pooled)
        if capture_features:
            n, width = pooled.shape
            feats = reshape(pooled, (n, width, 1, 1))
            pooled = reshape(feats, (n, width))
    logits = model._linear("head", pooled)
    return logits, (feats if capture_features else None)
