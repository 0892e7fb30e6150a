"""Central finite-difference checks against tape gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from .tensor import Tensor, backward, no_grad

# step sizes matched to precision; 32-bit differences are dominated by round-off below ~1e-3
DEFAULT_EPS = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-6}


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    diff = float(np.max(np.abs(analytic - numeric), initial=0.0))
    if scale == 0.0:
        return diff
    return diff / scale


def finite_diff_check(
    f: Callable[..., Tensor],
    x: Union[Tensor, Sequence[Tensor]],
    eps: Optional[float] = None,
    seed: int = 0,
    exclude: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    reference: Optional[tuple[Callable[..., Tensor], Sequence[Tensor]]] = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the tensor(s) ``x`` to any tensor; it is reduced to a scalar
    by a fixed random projection so the whole Jacobian is exercised.
    The error for each input is ``max|g_tape - g_fd| / max(|g_tape|, |g_fd|)``
    (infinity norms); the largest over all inputs is returned.

    ``exclude`` may return a boolean mask of input elements to skip, e.g.
    points within ``eps`` of a ReLU kink where the derivative is undefined.

    ``reference`` optionally supplies a higher-precision twin ``(f_ref, x_ref)``
    of the same function; the differences are then taken on the twin, whose
    inputs are first set to the values of ``x``.  This checks low-precision
    tape gradients without low-precision round-off in the oracle.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None

    out = f(*xs)
    # own stream: a projection drawn from the same seed as the inputs can be collinear with them
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    proj = rng.standard_normal(out.dims)
    loss = (out * Tensor(proj.astype(out.dtype), dtype=out.dtype)).sum()
    backward(loss)
    analytic = [np.zeros(t.dims, dtype=np.float64) if t.grad is None else t.grad.astype(np.float64) for t in xs]

    f_num, xs_num = f, xs
    if reference is not None:
        f_num, xs_num = reference[0], list(reference[1])
        if len(xs_num) != len(xs):
            raise ValueError("reference must take the same number of inputs")
        for t, r in zip(xs, xs_num):
            r.data[...] = t.data
    eps = DEFAULT_EPS[xs_num[0].dtype] if eps is None else eps

    def objective() -> float:
        with no_grad():
            return float(np.sum(f_num(*xs_num).data.astype(np.float64) * proj))

    worst = 0.0
    for t, g in zip(xs_num, analytic):
        numeric = np.zeros(t.dims, dtype=np.float64)
        skip = exclude(t.data) if exclude is not None else np.zeros(t.dims, dtype=bool)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            if skip.reshape(-1)[i]:
                continue
            orig = flat[i]
            flat[i] = orig + eps
            up = objective()
            flat[i] = orig - eps
            down = objective()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * eps)
        if skip.any():
            g = np.where(skip, 0.0, g)
        worst = max(worst, _relative_error(g, numeric))
    return worst


def near_kink(eps: float) -> Callable[[np.ndarray], np.ndarray]:
    """Exclusion mask for elements within ``eps`` of zero (ReLU kink)."""
    return lambda data: np.abs(data) <= eps
