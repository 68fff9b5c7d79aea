"""Central-difference gradient checking on a seeded sample of parameter entries."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .errors import NonFiniteGradient


@dataclass
class GradCheckResult:
    max_rel: float
    mean_rel: float
    checked: int
    floor: float
    worst: tuple = ()  # (param index, flat index, analytic, numeric)


def relative_error(a: float, b: float, floor: float = 1e-7) -> float:
    """``|a - b| / max(|a|, |b|, floor)``; the floor keeps near-zero entries from dominating."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-5,
    n: int = 200,
    seed: int = 0,
    floor: Optional[float] = None,
) -> GradCheckResult:
    """Compare autograd against ``(f(x + eps) - f(x - eps)) / (2 eps)``.

    ``loss_fn`` must be a pure function of the current values of ``params``
    returning a scalar. ``n`` entries are sampled without replacement over
    all parameters (all of them when there are fewer than ``n``).

    Entries whose gradient is too small to resolve against floating-point
    noise in the loss are compared on an absolute scale: by default the
    denominator never drops below ``1e4 * |f| * machine_eps / eps``, which
    is about ten thousand times the expected rounding error of a central
    difference.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NonFiniteGradient(f"loss is {float(loss.detach())} at the base point")
    if floor is None:
        floor = max(1e-10, 1e4 * abs(float(loss.detach())) * torch.finfo(loss.dtype).eps / eps)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]
    for i, g in enumerate(grads):
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"analytic gradient of parameter {i} is non-finite")

    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(total, size=min(n, total), replace=False))
    bounds = np.cumsum(sizes)

    errs, worst = [], (None, None, 0.0, 0.0)
    with torch.no_grad():
        for flat in picks:
            pi = int(np.searchsorted(bounds, flat, side="right"))
            j = int(flat - (bounds[pi - 1] if pi else 0))
            view = params[pi].view(-1)
            orig = view[j].item()
            view[j] = orig + eps
            up = float(loss_fn())
            view[j] = orig - eps
            down = float(loss_fn())
            view[j] = orig
            num = (up - down) / (2 * eps)
            ana = float(grads[pi].view(-1)[j])
            if not np.isfinite(num):
                raise NonFiniteGradient(f"numeric gradient of parameter {pi}[{j}] is non-finite")
            e = relative_error(ana, num, floor)
            if not errs or e > max(errs):
                worst = (pi, j, ana, num)
            errs.append(e)
    return GradCheckResult(float(max(errs)), float(np.mean(errs)), len(errs), floor, worst)
