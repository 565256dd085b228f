"""Backward linear prediction for repairing the head of vertical interferograms.

Model: x(n) = x_hat(n) + e(n), with x_hat a sum of p damped complex
exponentials alpha_k z_k^n.  Equivalently x(n) is predicted from the p
samples that follow it, x(n) ~ sum_k a_k x(n+k) + c, which lets the
corrupted first samples be regenerated from clean later ones.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr, solve_triangular


class LPError(ValueError):
    pass


class RankDeficientError(LPError):
    pass


@dataclass
class LPModel:
    order: int
    coefficients: np.ndarray  # a_1..a_p, weight of x(n+k)
    intercept: float = 0.0
    residual_rms: float = 0.0
    train_range: tuple = (0, 0)
    poles: np.ndarray = field(default=None, repr=False)
    amplitudes: np.ndarray = field(default=None, repr=False)
    train_max: float = 0.0

    @property
    def gammas(self):
        return np.log(np.abs(self.poles))

    @property
    def omegas(self):
        return np.angle(self.poles)


def _backward_system(x, p, lo, hi):
    """Rows n = lo..hi-p-1: x(n) against [x(n+1) .. x(n+p), 1]."""
    n = np.arange(lo, hi - p)
    M = np.empty((n.size, p + 1))
    for k in range(1, p + 1):
        M[:, k - 1] = x[n + k]
    M[:, p] = 1.0
    return M, x[n]


def fit_backward_lp(signal, p: int, train_range=None, rcond=1e-10, with_poles=True) -> LPModel:
    """Least-squares backward predictor of order ``p`` over ``train_range``.

    Solved by column-pivoted QR; a rank-deficient system raises
    :class:`RankDeficientError` so the caller can lower ``p``.  A constant
    term absorbs the DC level the modulation lineshape puts under every
    precursor-scan interferogram.
    """
    x = np.asarray(signal, dtype=float)
    p = int(p)
    if p < 1:
        raise LPError("p >= 1 required")
    lo, hi = train_range if train_range is not None else (x.size // 2, x.size)
    lo, hi = int(lo), int(hi)
    if not 0 <= lo < hi <= x.size:
        raise LPError(f"train range {(lo, hi)} outside signal of length {x.size}")
    if hi - lo < 4 * p:
        raise LPError(f"train range too short: {hi - lo} < 4p = {4 * p}")
    M, y = _backward_system(x, p, lo, hi)
    Q, R, piv = qr(M, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if d[0] == 0 or d[-1] <= rcond * d[0]:
        raise RankDeficientError(f"rank-deficient LP system at order {p}; reduce p")
    sol = np.empty(p + 1)
    sol[piv] = solve_triangular(R, Q.T @ y)
    a, c = sol[:p], float(sol[p])
    resid = y - M @ sol
    model = LPModel(p, a, c, float(np.sqrt(np.mean(resid**2))), (lo, hi),
                    train_max=float(np.max(np.abs(x[lo:hi]))))
    if with_poles:
        model.poles, model.amplitudes = lp_poles(model, x)
    return model


def lp_poles(model: LPModel, x):
    """Poles z_k and amplitudes alpha_k of the fitted model (diagnostic).

    Backward recursion x(n) = sum a_k x(n+k) is satisfied by z^n when
    sum_k a_k z^k = 1, i.e. the roots of a_p z^p + ... + a_1 z - 1.
    """
    coeffs = np.concatenate([model.coefficients[::-1], [-1.0]])
    while coeffs.size > 1 and coeffs[0] == 0:
        coeffs = coeffs[1:]
    poles = np.roots(coeffs) if coeffs.size > 1 else np.empty(0, dtype=complex)
    lo, hi = model.train_range
    n = np.arange(lo, hi)
    if poles.size == 0:
        return poles, np.empty(0, dtype=complex)
    with np.errstate(over="ignore", invalid="ignore"):
        V = np.power.outer(poles, n - lo).T
    if not np.all(np.isfinite(V)):
        return poles, np.full(poles.size, np.nan, dtype=complex)
    level = model.intercept / (1.0 - model.coefficients.sum()) if model.coefficients.sum() != 1 else 0.0
    amp, *_ = np.linalg.lstsq(V, x[lo:hi] - level, rcond=None)
    # referred to n = 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        amp = amp * np.power(poles, -float(lo))
    return poles, amp


def predict_backward(x, model: LPModel, n_corrupt: int) -> np.ndarray:
    """Backward recursion for samples n_corrupt-1 .. 0 from the samples after them."""
    a = model.coefficients
    p = model.order
    out = np.array(x, dtype=float, copy=True)
    for n in range(n_corrupt - 1, -1, -1):
        out[n] = float(np.dot(a, out[n + 1:n + 1 + p])) + model.intercept
    return out


def repair_initial(signal, model: LPModel, n_corrupt: int, guard=10.0) -> np.ndarray:
    """Replace samples [0, n_corrupt) by backward prediction.

    Samples at or after ``n_corrupt`` are returned unchanged.  If the
    recursion runs away (any value above ``guard`` times the training
    maximum), the corrupt region is zeroed instead and a warning is issued.
    """
    x = np.asarray(signal, dtype=float)
    n_corrupt = int(n_corrupt)
    if n_corrupt < 0:
        raise LPError("n_corrupt must be >= 0")
    if n_corrupt == 0:
        return x.copy()
    if n_corrupt >= x.size - 4 * model.order:
        raise LPError(f"n_corrupt too large: {n_corrupt} >= length - 4p = {x.size - 4 * model.order}")
    out = predict_backward(x, model, n_corrupt)
    head = out[:n_corrupt]
    limit = guard * model.train_max
    if not np.all(np.isfinite(head)) or np.max(np.abs(head)) > limit:
        warnings.warn("LP recursion unstable; corrupt head zeroed instead", RuntimeWarning,
                      stacklevel=2)
        out[:n_corrupt] = 0.0
    return out


def estimate_n_corrupt(m, N: int) -> int:
    """round(v_rotations) clamped to [0, N/4]."""
    rot = m.v_rotations if hasattr(m, "v_rotations") else float(m)
    n = int(round(rot))
    cap = int(N) // 4
    if n > cap:
        warnings.warn(f"estimated corrupt head {n} exceeds N/4; clamped to {cap}", RuntimeWarning,
                      stacklevel=2)
        return cap
    return max(0, n)


def default_order(n_precursors: int) -> int:
    """min(10, 2 * expected precursors): each real modulation line needs a
    conjugate pole pair."""
    return int(max(1, min(10, 2 * int(n_precursors))))


def repair_column(x, order, n_corrupt, train_fraction=0.5):
    """Fit-and-repair with automatic order reduction on rank deficiency."""
    if n_corrupt <= 0:
        return np.asarray(x, dtype=float).copy()
    n = len(x)
    lo = max(n_corrupt, n - int(round(train_fraction * n)))
    p = int(order)
    while p >= 1:
        try:
            model = fit_backward_lp(x, p, (lo, n), with_poles=False)
            return repair_initial(x, model, n_corrupt)
        except RankDeficientError:
            p -= 1
    # nothing to predict from (e.g. identically zero column)
    out = np.asarray(x, dtype=float).copy()
    out[:n_corrupt] = 0.0
    return out
