"""Central finite-difference gradient verification."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .engine import Tensor, no_grad
from .optim import ParamStore


def finite_difference_check(
    build_loss: Callable[[], Tensor],
    store: ParamStore,
    n_coords: int = 20,
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
    param_names: list[str] | None = None,
    per_param: bool = True,
) -> float:
    """Compare analytic gradients against central differences.

    ``build_loss`` must be a deterministic closure over the store parameters
    (it is re-evaluated with perturbed parameters). With ``per_param`` the
    check samples ``n_coords`` coordinates in every parameter tensor;
    otherwise it samples ``n_coords`` coordinates across the whole network.
    Returns the worst relative error. Meaningful only for float64 parameters;
    float32 rounding would swamp the difference quotient at h=1e-5.
    """
    rng = rng or np.random.default_rng(0)
    names = param_names if param_names is not None else store.trainable_names()
    store.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = {name: np.array(store[name].grad, copy=True) for name in names if store[name].grad is not None}

    if per_param:
        targets = [
            (name, c)
            for name in names
            for c in rng.choice(
                store[name].data.size, size=min(n_coords, store[name].data.size), replace=False
            )
        ]
    else:
        sizes = np.asarray([store[name].data.size for name in names])
        total = int(sizes.sum())
        picks = rng.choice(total, size=min(n_coords, total), replace=False)
        bounds = np.cumsum(sizes)
        targets = []
        for pick in picks:
            which = int(np.searchsorted(bounds, pick, side="right"))
            offset = int(pick - (bounds[which - 1] if which else 0))
            targets.append((names[which], offset))

    worst = 0.0
    for name, c in targets:
        flat = store[name].data.reshape(-1)
        a = analytic.get(name)
        an = float(a.reshape(-1)[c]) if a is not None else 0.0
        keep = flat[c]
        flat[c] = keep + h
        with no_grad():
            up = build_loss().item()
        flat[c] = keep - h
        with no_grad():
            down = build_loss().item()
        flat[c] = keep
        fd = (up - down) / (2.0 * h)
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
        worst = max(worst, rel)
    return worst
