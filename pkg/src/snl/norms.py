"""Mixed-norm machinery: iterated space/time norms with per-axis exponents,
fractional-smoothness norms, the subcriticality checker, and the anisotropic
maximal operator.

The space norm integrates axis 1 innermost and axis d outermost; the order
of the exponents matters, and permuting them so they increase from inner to
outer yields the smallest value.  Infinite exponents take the max over the
corresponding axis (the discrete essential sup).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .grid import GridFunction, SpaceTimeField, bessel_apply, gradient

__all__ = [
    "MixedExponent",
    "NormReport",
    "SubcriticalityReport",
    "PointwiseBoundReport",
    "mixed_space_norm",
    "mixed_spacetime_norm",
    "norm_report",
    "bessel_norm",
    "spacetime_bessel_norm",
    "sup_norm",
    "check_subcritical",
    "maximal_operator",
    "check_pointwise_bound",
    "parse_exponent",
]

INF = math.inf


def parse_exponent(value) -> "Fraction | float":
    """Exponents are exact rationals or infinity; floats must be exact."""
    if value in (INF, "inf", "Inf", "INF", "oo"):
        return INF
    if isinstance(value, Fraction):
        e = value
    elif isinstance(value, int):
        e = Fraction(value)
    elif isinstance(value, str):
        e = Fraction(value)
    elif isinstance(value, float):
        e = Fraction(value).limit_denominator(10**9)
        if float(e) != value:
            raise ValueError(f"float exponent {value} is not an exact rational")
    else:
        raise TypeError(f"cannot interpret exponent {value!r}")
    if e <= 1:
        raise ValueError(f"exponents must lie in (1, inf], got {value}")
    return e


def _inv(e) -> Fraction:
    return Fraction(0) if e == INF else Fraction(1, 1) / e


@dataclass(frozen=True)
class MixedExponent:
    """Per-axis space exponents p_1..p_d and a time exponent q, all in (1, inf]."""

    p: tuple
    q: object = INF

    def __post_init__(self):
        p = tuple(parse_exponent(v) for v in self.p)
        q = parse_exponent(self.q)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @property
    def dim(self) -> int:
        return len(self.p)

    def harmonic_sum(self) -> Fraction:
        """2/q + sum_i 1/p_i as an exact rational (1/inf = 0)."""
        return 2 * _inv(self.q) + sum((_inv(pi) for pi in self.p), Fraction(0))

    def margin(self, threshold: int) -> Fraction:
        return Fraction(threshold) - self.harmonic_sum()

    def describe(self) -> str:
        ps = ",".join("inf" if v == INF else str(v) for v in self.p)
        qs = "inf" if self.q == INF else str(self.q)
        return f"p=({ps});q={qs}"


@dataclass(frozen=True)
class SubcriticalityReport:
    ok: bool
    margin: Fraction
    threshold: int
    exponents: MixedExponent


def check_subcritical(e: MixedExponent, threshold: int = 1) -> SubcriticalityReport:
    """Strict test 2/q + sum 1/p_i < threshold, in exact rational arithmetic."""
    if threshold not in (1, 2):
        raise ValueError("threshold must be 1 (drift scale) or 2 (occupation scale)")
    margin = e.margin(threshold)
    return SubcriticalityReport(margin > 0, margin, threshold, e)


@dataclass(frozen=True)
class NormReport:
    value: float
    exponents: MixedExponent
    axis_order: tuple[int, ...]

    def csv_row(self) -> str:
        order = " ".join(str(a + 1) for a in self.axis_order)
        return f"{self.value!r},{self.exponents.describe()},{order}"


def _exponent_list(p, dim: int):
    vals = tuple(parse_exponent(v) for v in p)
    if len(vals) != dim:
        raise ValueError(f"need {dim} space exponents, got {len(vals)}")
    return vals


def mixed_space_norm(f: GridFunction, p: Sequence, axis_order: Sequence[int] | None = None) -> float:
    """Iterated rectangle-rule norm with exponent p_i on the i-th reduced axis.

    Axis 1 is reduced first (innermost integral) and axis d last.  An
    explicit ``axis_order`` integrates the axes in that order instead, with
    p_i bound to the axis in position i.  Vector and matrix fields are
    reduced to their pointwise Euclidean magnitude first.
    """
    grid = f.grid
    exps = _exponent_list(p, grid.dim)
    order = tuple(range(grid.dim)) if axis_order is None else tuple(axis_order)
    if sorted(order) != list(range(grid.dim)):
        raise ValueError(f"axis_order must be a permutation of 0..{grid.dim - 1}")

    work = f.magnitude().samples
    # put the requested integration order innermost-first
    work = np.transpose(work, order)
    spacing = [grid.spacing[a] for a in order]

    scale = float(np.max(work)) if work.size else 0.0
    if scale == 0.0:
        return 0.0
    work = work / scale

    for e, h in zip(exps, spacing):
        if e == INF:
            work = np.max(work, axis=0)
        else:
            pe = float(e)
            work = (np.sum(work**pe, axis=0) * h) ** (1.0 / pe)
    return float(work) * scale


def norm_report(f: GridFunction, p: Sequence, axis_order: Sequence[int] | None = None) -> NormReport:
    order = tuple(range(f.grid.dim)) if axis_order is None else tuple(axis_order)
    value = mixed_space_norm(f, p, axis_order)
    return NormReport(value, MixedExponent(tuple(p), INF), order)


def mixed_spacetime_norm(F: SpaceTimeField, e: MixedExponent) -> float:
    """Trapezoid rule in time of the per-slice space norm raised to q.

    q = inf takes the max over slices (with the space norm still mixed).
    """
    if e.dim != F.grid.dim:
        raise ValueError("exponent dimension does not match field dimension")
    per_slice = np.array([mixed_space_norm(s, e.p) for s in F.slices])
    if e.q == INF:
        return float(np.max(per_slice))
    q = float(e.q)
    w = np.full(per_slice.size, F.dt)
    w[0] = w[-1] = 0.5 * F.dt
    return float(np.sum(w * per_slice**q) ** (1.0 / q))


def sup_norm(F: SpaceTimeField) -> float:
    """sup over time and space of |F| (Euclidean magnitude for non-scalars)."""
    return max(s.magnitude().max_abs() for s in F.slices)


def bessel_norm(f: GridFunction, alpha: float, p: Sequence) -> float:
    """Mixed space norm of (1 - Laplacian)^(alpha/2) f."""
    return mixed_space_norm(bessel_apply(f, alpha, 1.0), p)


def spacetime_bessel_norm(F: SpaceTimeField, alpha: float, e: MixedExponent) -> float:
    """Time norm (exponent q, max for q = inf) of the per-slice Bessel norm."""
    per_slice = np.array([bessel_norm(s, alpha, e.p) for s in F.slices])
    if e.q == INF:
        return float(np.max(per_slice))
    q = float(e.q)
    w = np.full(per_slice.size, F.dt)
    w[0] = w[-1] = 0.5 * F.dt
    return float(np.sum(w * per_slice**q) ** (1.0 / q))


# ---------------------------------------------------------------------------
# anisotropic Hardy-Littlewood maximal operator
# ---------------------------------------------------------------------------


def _dyadic_levels(N: int) -> list[int]:
    # radii h, 2h, ..., L/2  <=>  r/h in {1, 2, ..., N/2}
    return [1 << j for j in range(int(math.log2(N // 2)) + 1)] if N >= 2 else [1]


def maximal_operator(f: GridFunction, all_combinations: bool | None = None) -> GridFunction:
    """Pointwise sup of box averages over dyadic per-axis radii.

    Boxes are the periodic anisotropic windows |y_i - x_i| < r_i with
    r_i in {h_i, 2 h_i, ..., L_i / 2}.  For d <= 2 (or when forced) every
    cross-axis radius combination is searched; for d >= 3 the radii share a
    common dyadic level per axis to bound the combination count.
    """
    grid = f.grid
    mag = f.magnitude().samples
    levels = [_dyadic_levels(N) for N in grid.points]
    if all_combinations is None:
        all_combinations = grid.dim <= 2

    out = np.array(mag, dtype=np.float64)  # r_i = h_i box is the node itself

    if all_combinations:
        combos = np.stack(np.meshgrid(*[np.arange(len(l)) for l in levels], indexing="ij"), -1)
        combos = combos.reshape(-1, grid.dim)
    else:
        n = min(len(l) for l in levels)
        combos = np.tile(np.arange(n)[:, None], (1, grid.dim))

    for combo in combos:
        sizes = [2 * levels[a][j] - 1 for a, j in enumerate(combo)]
        if all(s == 1 for s in sizes):
            continue
        avg = uniform_filter(mag, size=sizes, mode="wrap")
        np.maximum(out, avg, out=out)
    return GridFunction(grid, "scalar", out)


@dataclass(frozen=True)
class PointwiseBoundReport:
    constant: float
    pairs_used: int
    pairs_skipped: int


def check_pointwise_bound(f: GridFunction, pairs: Iterable) -> PointwiseBoundReport:
    """Smallest empirical constant in the two-point gradient-average bound
    |f(x) - f(y)| <= C |x - y| (M|grad f|(x) + M|grad f|(y)).

    Degenerate pairs with x = y are skipped and counted.
    """
    grad_mag = gradient(f).magnitude()
    M = maximal_operator(grad_mag)
    best = 0.0
    used = skipped = 0
    pair_arr = np.asarray(list(pairs), dtype=np.float64)
    if pair_arr.size == 0:
        return PointwiseBoundReport(0.0, 0, 0)
    xs, ys = pair_arr[:, 0, :], pair_arr[:, 1, :]
    dist = np.linalg.norm(xs - ys, axis=-1)
    keep = dist > 1e-14
    skipped = int(np.sum(~keep))
    if not np.any(keep):
        return PointwiseBoundReport(0.0, 0, skipped)
    xs, ys, dist = xs[keep], ys[keep], dist[keep]
    fx = f.evaluate(xs)
    fy = f.evaluate(ys)
    mx = M.evaluate(xs)
    my = M.evaluate(ys)
    denom = dist * (mx + my)
    ratio = np.where(denom > 0, np.abs(fx - fy) / np.where(denom > 0, denom, 1.0), np.inf)
    # a vanishing denominator with a vanishing numerator contributes nothing
    ratio = np.where((denom == 0) & (np.abs(fx - fy) == 0), 0.0, ratio)
    best = float(np.max(ratio))
    used = int(xs.shape[0])
    return PointwiseBoundReport(best, used, skipped)
