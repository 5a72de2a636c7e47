"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    checked: int
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.max_rel_error))


def gradcheck(loss_fn, params: dict[str, Tensor], eps: float = 1e-5,
              max_entries_per_param: int | None = None,
              rng: np.random.Generator | None = None) -> GradcheckReport:
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values
    every call and return a scalar Tensor. Relative error per entry is
    |analytic - numeric| / max(1, |numeric|). When a parameter has more
    entries than ``max_entries_per_param``, a random subset is probed.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    worst = -1.0
    worst_param = ""
    worst_index: tuple = ()
    per_param: dict[str, float] = {}
    checked = 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(flat.size, size=max_entries_per_param, replace=False)
        pmax = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn().item()
            flat[i] = orig - eps
            lm = loss_fn().item()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - numeric) / max(1.0, abs(numeric))
            checked += 1
            if rel > pmax:
                pmax = rel
            if rel > worst:
                worst = rel
                worst_param = name
                worst_index = np.unravel_index(i, p.data.shape)
        per_param[name] = pmax
    return GradcheckReport(max_rel_error=worst, worst_param=worst_param,
                           worst_index=tuple(int(v) for v in worst_index),
                           checked=checked, per_param=per_param)
