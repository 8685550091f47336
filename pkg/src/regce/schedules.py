"""Learning-rate schedules, plateau detection and EMA weight averaging."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .models import Model

SCHEDULE_KINDS = ("constant", "cosine", "step", "sharp")


@dataclass
class PlateauSpec:
    patience: int = 10
    min_relative_improvement: float = 1e-3
    max_trigger_epoch: int | None = None

    def validate(self) -> None:
        if self.patience < 1:
            raise ValueError("plateau patience must be >= 1")
        if self.min_relative_improvement < 0:
            raise ValueError("min_relative_improvement must be >= 0")


@dataclass
class LrScheduleSpec:
    kind: str = "sharp"
    initial_lr: float = 0.1
    decay_factor: float = 0.01
    second_decay_gap: int = 20
    plateau: PlateauSpec = field(default_factory=PlateauSpec)
    total_epochs: int = 200
    milestones: list | None = None
    gamma: float = 0.1

    def validate(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if self.initial_lr < 0:
            raise ValueError("initial_lr must be >= 0")
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.second_decay_gap < 1:
            raise ValueError("second_decay_gap must be >= 1")
        self.plateau.validate()


class PlateauDetector:
    """Fires once when the best loss has not improved for ``patience`` epochs."""

    def __init__(self, spec: PlateauSpec):
        spec.validate()
        self.spec = spec
        self.best = math.inf
        self.stagnant = 0
        self.triggered = False

    def update(self, loss: float) -> bool:
        if not math.isfinite(loss):
            raise FloatingPointError(f"plateau detector received non-finite loss {loss}")
        if math.isinf(self.best) or loss < self.best - self.spec.min_relative_improvement * abs(self.best):
            self.best = loss
            self.stagnant = 0
        else:
            self.stagnant += 1
        if not self.triggered and self.stagnant >= self.spec.patience:
            self.triggered = True
            return True
        return False


def plateau_update(detector: PlateauDetector, epoch_train_loss: float) -> bool:
    return detector.update(epoch_train_loss)


class ScheduleState:
    """Tracks the sharp-decay trigger.

    ``trigger_epoch`` is the first epoch that runs at the decayed rate.
    """

    def __init__(self, spec: LrScheduleSpec):
        spec.validate()
        self.spec = spec
        self.detector = PlateauDetector(spec.plateau)
        self.trigger_epoch: int | None = None

    def end_epoch(self, epoch: int, train_loss: float) -> bool:
        """Feed the epoch-mean training loss; True if the decay was triggered now."""
        fired = self.detector.update(train_loss)
        if self.spec.kind != "sharp" or self.trigger_epoch is not None:
            return False
        cap = self.spec.plateau.max_trigger_epoch
        if fired or (cap is not None and epoch + 1 >= cap):
            self.trigger_epoch = epoch + 1
            return True
        return False

    def lr(self, epoch: int) -> float:
        return lr_at(self.spec, self.trigger_epoch, epoch)


def lr_at(spec: LrScheduleSpec, trigger_epoch: int | None, epoch: int) -> float:
    """Pure function of (spec, trigger epoch, epoch)."""
    lr0 = spec.initial_lr
    if spec.kind == "constant":
        return lr0
    if spec.kind == "cosine":
        return lr0 * 0.5 * (1 + math.cos(math.pi * epoch / spec.total_epochs))
    if spec.kind == "step":
        milestones = spec.milestones
        if milestones is None:
            milestones = [spec.total_epochs // 2, (3 * spec.total_epochs) // 4]
        return lr0 * spec.gamma ** sum(epoch >= m for m in milestones)
    if trigger_epoch is None or epoch < trigger_epoch:
        return lr0
    if epoch < trigger_epoch + spec.second_decay_gap:
        return lr0 * spec.decay_factor
    return lr0 * spec.decay_factor * spec.decay_factor


# -- EMA ------------------------------------------------------------------------
@dataclass
class EmaState:
    momentum: float = 0.999
    shadow: dict | None = None
    buffers: dict | None = None
    num_updates: int = 0

    @classmethod
    def from_model(cls, model: Model, momentum: float = 0.999) -> "EmaState":
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"EMA momentum must lie in [0, 1), got {momentum}")
        state = cls(momentum)
        state.shadow = {k: p.data.astype(np.float64) for k, p in model.params.items()}
        state.buffers = {k: b.copy() for k, b in model.buffers.items()}
        state._template = model
        return state

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"shadow/{k}": v for k, v in self.shadow.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        out["meta/momentum"] = np.array([self.momentum])
        out["meta/num_updates"] = np.array([self.num_updates], dtype=np.int64)
        return out

    def save(self, path) -> None:
        checkpoint.save(path, self.state_dict())

    def load(self, path) -> None:
        arrays = checkpoint.load(path)
        self.shadow = {k[7:]: v for k, v in arrays.items() if k.startswith("shadow/")}
        self.buffers = {k[7:]: v for k, v in arrays.items() if k.startswith("buffer/")}
        self.momentum = float(arrays["meta/momentum"][0])
        self.num_updates = int(arrays["meta/num_updates"][0])


def ema_update(model: Model, state: EmaState) -> None:
    """shadow <- m*shadow + (1-m)*online; batchnorm buffers copied verbatim."""
    if state.shadow is None:
        raise ValueError("EMA state is uninitialized; build it with EmaState.from_model")
    m = state.momentum
    for k, p in model.params.items():
        s = state.shadow.get(k)
        if s is None or s.shape != p.shape:
            raise ValueError(f"EMA shape mismatch for {k!r}: {None if s is None else s.shape} vs {p.shape}")
        s *= m
        s += (1 - m) * p.data.astype(np.float64, copy=False)
    for k, b in model.buffers.items():
        state.buffers[k] = b.copy()
    state.num_updates += 1


def ema_model(state: EmaState, template: Model | None = None) -> Model:
    """An eval-mode model carrying the shadow weights (an independent snapshot)."""
    if state.shadow is None or state.num_updates == 0:
        raise ValueError("EMA model requested before any update")
    template = template if template is not None else getattr(state, "_template", None)
    if template is None:
        raise ValueError("EMA model needs a template model for its architecture")
    model = template.clone()
    model.load_state_dict({**state.shadow, **state.buffers})
    return model.eval()
