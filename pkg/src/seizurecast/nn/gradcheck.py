"""Central finite-difference check of backward gradients."""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from .graph import Parameter


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    loss_fn: Callable[[bool], float],
    params: Sequence[Parameter],
    eps: float | Sequence[float] = 1e-5,
    entries_per_param: int | None = None,
    n_directions: int = 0,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Compare backward gradients with central finite differences.

    ``loss_fn(backward)`` must run a deterministic forward pass (dropout off)
    and return the scalar loss; when ``backward`` is true it must also zero
    and fill ``param.grad`` for every parameter.

    Every parameter tensor is checked.  With ``entries_per_param=None`` every
    coordinate is perturbed; otherwise that many coordinates are drawn per
    tensor (seeded).  ``n_directions`` adds random-direction checks, each of
    which perturbs all parameters at once and compares the directional
    derivative with <grad, v>.

    ``eps`` may be a sequence of step sizes; each check then keeps the best
    agreement over the steps.  A large step can straddle a ReLU or max-pool
    kink and a small one loses digits to roundoff, so on deep graphs a pair
    such as ``(1e-6, 1e-7)`` separates finite-difference artifacts from
    genuine backward errors (which no step size hides).

    Returns:
        The maximum relative error |a - n| / max(|a|, |n|, floor).
    """
    steps = (eps,) if np.isscalar(eps) else tuple(eps)
    rng = np.random.default_rng(seed)
    loss_fn(True)
    analytic = {p.name: p.grad.copy() for p in params}
    worst = 0.0

    for p in params:
        flat = p.value.reshape(-1)
        if entries_per_param is None or entries_per_param >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=entries_per_param, replace=False)
        g = analytic[p.name].reshape(-1)
        for i in idx:
            orig = flat[i]
            err = np.inf
            for h in steps:
                flat[i] = orig + h
                up = loss_fn(False)
                flat[i] = orig - h
                down = loss_fn(False)
                flat[i] = orig
                err = min(err, relative_error(g[i], (up - down) / (2 * h), floor))
            worst = max(worst, err)

    for _ in range(n_directions):
        dirs = {p.name: rng.standard_normal(p.shape) for p in params}
        norm = np.sqrt(sum((v ** 2).sum() for v in dirs.values()))
        expected = sum((analytic[p.name] * dirs[p.name]).sum() for p in params) / norm
        originals = {p.name: p.value.copy() for p in params}
        err = np.inf
        for h in steps:
            vals = []
            for sign in (1.0, -1.0):
                for p in params:
                    p.value[...] = originals[p.name] + sign * h * dirs[p.name] / norm
                vals.append(loss_fn(False))
            err = min(err, relative_error(expected, (vals[0] - vals[1]) / (2 * h), floor))
        for p in params:
            p.value[...] = originals[p.name]
        worst = max(worst, err)

    loss_fn(True)
    return worst
