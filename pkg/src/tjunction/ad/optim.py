"""Named parameter store with an adaptive-moment optimizer and linear lr decay."""

from __future__ import annotations

import logging

import numpy as np

from .engine import Tensor

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class ParamStore:
    """Holds named trainable arrays plus their optimizer moments.

    The learning-rate schedule decays linearly from ``base_lr`` to zero over
    ``total_updates`` applied updates. Updates with non-finite gradients are
    skipped (and logged) without advancing the schedule.
    """

    def __init__(self, base_lr: float = 1e-4, total_updates: int = 1):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.base_lr = base_lr
        self.total_updates = max(1, int(total_updates))
        self.skipped_updates = 0

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(array), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def set_trainable(self, prefix: str, trainable: bool) -> None:
        for name, t in self.params.items():
            if name.startswith(prefix):
                t.requires_grad = trainable

    def trainable_names(self) -> list[str]:
        return [n for n, t in self.params.items() if t.requires_grad]

    def n_params(self, prefix: str = "") -> int:
        return sum(t.data.size for n, t in self.params.items() if n.startswith(prefix))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def current_lr(self) -> float:
        frac = 1.0 - self.step_count / self.total_updates
        return self.base_lr * max(0.0, frac)

    def configure_schedule(self, base_lr: float, total_updates: int) -> None:
        self.base_lr = base_lr
        self.total_updates = max(1, int(total_updates))

    def adam_step(self, grads: dict[str, np.ndarray] | None = None, lr: float | None = None) -> bool:
        """Apply one bias-corrected adaptive-moment update.

        Returns False (and leaves parameters untouched) when any gradient is
        non-finite.
        """
        if grads is None:
            grads = {
                name: t.grad for name, t in self.params.items() if t.requires_grad and t.grad is not None
            }
        if not grads:
            return True
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                self.skipped_updates += 1
                log.warning("adam_step skipped: non-finite gradient in %s", name)
                return False
        if lr is None:
            lr = self.current_lr()
        t = self.step_count + 1
        bc1 = 1.0 - BETA1**t
        bc2 = 1.0 - BETA2**t
        for name, g in grads.items():
            p = self.params[name]
            m = self.m[name]
            v = self.v[name]
            m *= BETA1
            m += (1.0 - BETA1) * g
            v *= BETA2
            v += (1.0 - BETA2) * (g * g)
            p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + EPS)
        self.step_count = t
        return True
