"""Probit surrogates ``Phi(a*sqrt(n) + b)`` for self-consistency curves.

Multi-choice curves have no convenient closed form, so the online allocator
works with this two-parameter family instead.  The slope ``a`` can be derived
from the answer distribution (:func:`margin_stats`) or fitted to a measured
curve (:func:`fit_probit`).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

from .core import as_theta
from .errors import ContractError, UnfittableCurveError

CLIP = 1e-6
MIN_SLOPE = 1e-8  # below this a fitted slope is rounding noise on a flat curve
DEFAULT_K_MIN = 5


class ConcavityWarning(UserWarning):
    """The surrogate is not concave on the greedy's budget range."""


@dataclass(frozen=True)
class SurrogateParams:
    a: float
    b: float = 0.0
    k_min: int = DEFAULT_K_MIN

    def __post_init__(self):
        if not (math.isfinite(self.a) and self.a > 0):
            raise ContractError(f"surrogate slope must be positive, got {self.a}")
        if not math.isfinite(self.b):
            raise ContractError("surrogate offset must be finite")
        if int(self.k_min) != self.k_min or self.k_min < 1:
            raise ContractError("k_min must be a positive integer")

    @property
    def is_concave(self) -> bool:
        # Phi is concave on [0, inf), so the curve is concave once its argument is >= 0
        return self.a * math.sqrt(self.k_min) + self.b >= 0

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "k_min": self.k_min}


@dataclass(frozen=True)
class MarginStats:
    delta: np.ndarray
    sigma: np.ndarray
    a_theoretical: float
    positive_definite: bool

    @property
    def degenerate(self) -> bool:
        return self.a_theoretical == 0.0


def margin_stats(theta) -> MarginStats:
    """Margins of the top answer over the others and their per-trace covariance.

    ``theta`` is sorted descending first, so callers may pass any order.
    """
    t = np.sort(as_theta(theta))[::-1]
    top, rest = t[0], t[1:]
    delta = top - rest
    sigma = top - np.outer(delta, delta)
    sigma[np.diag_indices_from(sigma)] = top + rest - delta**2
    # Cholesky alone accepts matrices that are singular up to rounding
    pd = bool(np.linalg.eigvalsh(sigma).min() > 1e-12 * max(np.trace(sigma), 1e-300))
    sd = np.sqrt(np.clip(np.diag(sigma), 0.0, None))
    if delta.min() <= 0:
        a = 0.0
    else:
        a = float(np.min(delta / sd))
    return MarginStats(delta=delta, sigma=sigma, a_theoretical=a, positive_definite=pd)


@dataclass(frozen=True)
class ProbitFit:
    params: SurrogateParams
    max_abs_error: float


def fit_probit(curve: Iterable[Sequence[float]], k_min: int = DEFAULT_K_MIN) -> ProbitFit:
    """Least-squares fit of ``Phi^-1(sc)`` against ``sqrt(n)`` over odd budgets.

    ``curve`` is a sequence of ``(n, sc)`` pairs.  Even budgets are ignored.
    The fit error is reported over every odd point, saturated ones included.
    Raises :class:`UnfittableCurveError` when the odd points are all saturated
    or carry no positive slope.
    """
    pts = np.asarray(list(curve), dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ContractError("curve must be a list of (budget, sc) pairs")
    n, sc = pts[:, 0], pts[:, 1]
    if np.any(n <= 0) or np.any(n != np.round(n)):
        raise ContractError("budgets must be positive integers")
    if np.any((sc < -1e-12) | (sc > 1 + 1e-12)):
        raise ContractError("sc values must lie in [0, 1]")
    odd = n.astype(np.int64) % 2 == 1
    n, sc = n[odd], sc[odd]
    if n.size < 2 or np.unique(n).size < 2:
        raise UnfittableCurveError("need at least two distinct odd budgets")
    clipped = np.clip(sc, CLIP, 1 - CLIP)
    if np.all(clipped >= 1 - CLIP):
        raise UnfittableCurveError("curve is saturated at 1")
    # Saturated points sit at an arbitrary probit height set by the clip and
    # drag the slope down; leave them out while two informative points remain.
    keep = clipped < 1 - CLIP
    if np.unique(n[keep]).size < 2:
        keep[:] = True
    x = np.sqrt(n)
    y = ndtri(clipped)
    X = np.column_stack([x[keep], np.ones(keep.sum())])
    (a, b), *_ = np.linalg.lstsq(X, y[keep], rcond=None)
    if not a > MIN_SLOPE:
        raise UnfittableCurveError(f"fitted slope {a:.3g} is not positive")
    err = float(np.max(np.abs(ndtr(a * x + b) - sc)))
    return ProbitFit(SurrogateParams(float(a), float(b), k_min), err)


def surrogate_sc(p: SurrogateParams, n) -> float:
    if n < 0:
        raise ContractError("budget must be nonnegative")
    return float(ndtr(p.a * math.sqrt(n) + p.b))


def log_surrogate_step(p: SurrogateParams, n_from: int, n_to: int) -> float:
    """``log(g(n_to) - g(n_from))`` without cancellation in either tail."""
    x1 = p.a * math.sqrt(n_from) + p.b
    x2 = p.a * math.sqrt(n_to) + p.b
    if x2 <= x1:
        return -math.inf
    if x1 > 0:
        # difference of upper tails: sf(x1) - sf(x2)
        l1, l2 = float(log_ndtr(-x1)), float(log_ndtr(-x2))
    else:
        l1, l2 = float(log_ndtr(x2)), float(log_ndtr(x1))
    if l2 == -math.inf:
        return l1
    return l1 + math.log1p(-math.exp(l2 - l1))


def surrogate_effective_gain(p: SurrogateParams, n_odd: int) -> float:
    """Gain of the two-trace step ``n_odd -> n_odd + 2``.

    Warns with :class:`ConcavityWarning` when the parameters violate the
    concavity condition, since gains then need not decrease.
    """
    if n_odd % 2 != 1 or n_odd < p.k_min:
        raise ContractError(f"n_odd must be odd and >= k_min={p.k_min}, got {n_odd}")
    if not p.is_concave:
        warnings.warn(f"surrogate {p} is not concave from k_min", ConcavityWarning, stacklevel=2)
    return math.exp(log_surrogate_step(p, n_odd, n_odd + 2))
