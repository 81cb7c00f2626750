"""Path simulation and Monte-Carlo probes.

Brownian paths are dyadic: level l has 2^l uniform steps on [0, T], and a
path refines to level l+1 by conditional midpoint draws that leave every
existing node value untouched.  All randomness is generated by the
counter-based Philox generator keyed by (seed, path index, level), with the
level-l midpoints drawn in node order, so refinement, batching and
threading are all bit-reproducible.

Drift callables receive (t, X) with X of shape (..., d) and must return an
array of drift vectors; diffusion coefficients are either constants
(scalar, diagonal vector, or matrix) or callables with the same batch
contract returning scalars, per-axis diagonals of shape (..., d), or full
matrices of shape (..., d, d).  Non-finite drift evaluations are clipped to
the drift cap component-wise; singular sources evaluated along a path are
integrated with non-finite nodal values dropped (they carry zero measure in
the limit).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .zvonkin import ZvonkinMap

__all__ = [
    "BrownianPath",
    "Trajectory",
    "MCEstimate",
    "CouplingTable",
    "sample_path",
    "refine",
    "euler_maruyama",
    "coupling_experiment",
    "krylov_mc",
    "girsanov_weight",
    "khasminskii_functional",
    "zvonkin_simulate",
]

MAX_LEVEL = 30
DEFAULT_DRIFT_CAP = 1.0e3
DEFAULT_RADIUS_MAX = 1.0e2


def _level_rng(seed: int, path_index: int, level: int) -> np.random.Generator:
    if seed < 0 or path_index < 0:
        raise ValueError("seed and path index must be non-negative")
    ss = np.random.SeedSequence([int(seed), int(path_index), int(level)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class BrownianPath:
    """Dyadic Brownian path with bit-reproducible bridge refinement."""

    seed: int
    path_index: int
    horizon: float
    level: int
    dim: int
    values: np.ndarray = field(repr=False)  # (2^level + 1, dim)

    @property
    def steps(self) -> int:
        return 1 << self.level

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)

    def refine(self) -> "BrownianPath":
        return refine(self)


def sample_path(seed: int, horizon: float, level: int, dim: int = 1, *, path_index: int = 0) -> BrownianPath:
    """Build a path at the requested level by refining from level 0."""
    if not 0 <= level <= MAX_LEVEL:
        raise ValueError(f"level must lie in [0, {MAX_LEVEL}]")
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    rng = _level_rng(seed, path_index, 0)
    values = np.zeros((2, dim))
    values[1] = math.sqrt(horizon) * rng.standard_normal(dim)
    path = BrownianPath(seed, path_index, horizon, 0, dim, values)
    for _ in range(level):
        path = refine(path)
    return path


def refine(path: BrownianPath) -> BrownianPath:
    """Insert conditional midpoints; existing node values are reused verbatim."""
    if path.level >= MAX_LEVEL:
        raise ValueError(f"cannot refine past level {MAX_LEVEL}")
    rng = _level_rng(path.seed, path.path_index, path.level + 1)
    old = path.values
    n = old.shape[0] - 1
    noise = rng.standard_normal((n, path.dim))
    mids = 0.5 * (old[:-1] + old[1:]) + math.sqrt(path.dt / 4.0) * noise
    values = np.empty((2 * n + 1, path.dim))
    values[::2] = old
    values[1::2] = mids
    return BrownianPath(path.seed, path.path_index, path.horizon, path.level + 1, path.dim, values)


def _paths_values(seed: int, indices, horizon: float, level: int, dim: int) -> np.ndarray:
    return np.stack(
        [sample_path(seed, horizon, level, dim, path_index=i).values for i in indices]
    )


# ---------------------------------------------------------------------------
# coefficient handling
# ---------------------------------------------------------------------------


def _cap_drift(vals: np.ndarray, cap: float) -> np.ndarray:
    vals = np.where(np.isnan(vals), 0.0, vals)
    vals = np.clip(vals, -cap, cap)
    nrm = np.linalg.norm(vals, axis=-1, keepdims=True)
    over = nrm > cap
    if np.any(over):
        vals = np.where(over, vals * (cap / np.where(nrm > 0, nrm, 1.0)), vals)
    return vals


def _eval_drift(drift, t: float, X: np.ndarray, cap: float) -> np.ndarray:
    vals = np.asarray(drift(t, X), dtype=np.float64)
    if vals.shape != X.shape:
        raise ValueError(
            f"drift returned shape {vals.shape}; expected {X.shape} (one vector per state)"
        )
    return _cap_drift(vals, cap)


class _Diffusion:
    """Normalizes the accepted diffusion formats behind one apply() call."""

    def __init__(self, spec, dim: int):
        self.dim = dim
        self.kind = None
        self.const = None
        if callable(spec):
            self.fn = spec
            self.kind = "callable"
        else:
            arr = np.asarray(spec, dtype=np.float64)
            if arr.ndim == 0:
                self.kind, self.const = "scalar", float(arr)
            elif arr.shape == (dim,):
                self.kind, self.const = "diag", arr
            elif arr.shape == (dim, dim):
                self.kind, self.const = "matrix", arr
            else:
                raise ValueError(f"cannot interpret diffusion of shape {arr.shape} in dim {dim}")

    @property
    def is_constant(self) -> bool:
        return self.kind != "callable"

    def apply_constant(self, dW: np.ndarray) -> np.ndarray:
        if self.kind == "scalar":
            return dW if self.const == 1.0 else self.const * dW
        if self.kind == "diag":
            return self.const * dW
        return dW @ self.const.T

    def _classify(self, raw: np.ndarray, X: np.ndarray) -> tuple[str, np.ndarray]:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim == 0 or raw.shape == X.shape[:-1]:
            return "scalar", raw
        if raw.shape == X.shape:
            return "diag", raw
        if raw.shape == X.shape + (self.dim,):
            return "matrix", raw
        raise ValueError(
            f"diffusion callable returned shape {raw.shape}; expected scalar, "
            f"{X.shape} (diagonal) or {X.shape + (self.dim,)} (matrix)"
        )

    def apply(self, t: float, X: np.ndarray, dW: np.ndarray) -> np.ndarray:
        if self.is_constant:
            return self.apply_constant(dW)
        kind, raw = self._classify(self.fn(t, X), X)
        if kind == "scalar":
            return np.asarray(raw)[..., None] * dW if np.ndim(raw) else raw * dW
        if kind == "diag":
            return raw * dW
        return np.einsum("...ij,...j->...i", raw, dW)

    def matrix(self, t: float, X: np.ndarray) -> np.ndarray:
        """Full (..., d, d) matrix at the given states."""
        d = self.dim
        eye = np.eye(d)
        if self.kind == "scalar":
            return np.broadcast_to(self.const * eye, X.shape + (d,)).copy()
        if self.kind == "diag":
            return np.broadcast_to(np.diag(self.const), X.shape + (d,)).copy()
        if self.kind == "matrix":
            return np.broadcast_to(self.const, X.shape + (d,)).copy()
        kind, raw = self._classify(self.fn(t, X), X)
        if kind == "scalar":
            return np.asarray(raw)[..., None, None] * eye if np.ndim(raw) else raw * np.broadcast_to(eye, X.shape + (d,)).copy()
        if kind == "diag":
            return raw[..., :, None] * eye
        return raw


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (steps + 1, dim)
    exploded: bool
    exit_index: int | None


def _drift_accumulate(drift, diffusion: _Diffusion, x0: np.ndarray, W: np.ndarray,
                      dt: float, drift_cap: float, radius_max: float):
    """Batch Euler-Maruyama core.

    W has shape (B, n + 1, d).  For constant diffusion the noise term is
    rebased on the absolute Brownian values, which makes driftless runs
    reproduce x0 + sigma W bit-for-bit (and keeps level-coupled runs exactly
    comparable on shared nodes).  Returns (states, exit_index) with states of
    shape (B, n + 1, d) and exit_index -1 where no explosion happened.
    """
    B, n1, d = W.shape
    X = np.broadcast_to(np.asarray(x0, dtype=np.float64), (B, d)).copy()
    states = np.empty_like(W)
    states[:, 0] = X
    active = np.ones(B, dtype=bool)
    exit_index = np.full(B, -1, dtype=np.int64)

    rebase = diffusion.is_constant
    D = np.zeros((B, d)) if rebase else None

    for j in range(n1 - 1):
        if not np.any(active):
            states[:, j + 1 :] = X[:, None, :]
            break
        t = j * dt
        if drift is None:
            bstep = 0.0
        else:
            bstep = _eval_drift(drift, t, X, drift_cap) * dt
        if rebase:
            D = np.where(active[:, None], D + bstep, D)
            X_new = x0 + D + diffusion.apply_constant(W[:, j + 1])
            X = np.where(active[:, None], X_new, X)
        else:
            dW = W[:, j + 1] - W[:, j]
            noise = diffusion.apply(t, X, dW)
            X = np.where(active[:, None], X + bstep + noise, X)
        bad = active & ~np.isfinite(X).all(axis=-1)
        if np.any(bad):
            raise FloatingPointError(f"non-finite state at step {j + 1}")
        escaped = active & (np.linalg.norm(X, axis=-1) > radius_max)
        exit_index[escaped] = j + 1
        active &= ~escaped
        states[:, j + 1] = X
    return states, exit_index


def euler_maruyama(
    drift,
    diffusion,
    x0,
    path: BrownianPath,
    *,
    drift_cap: float = DEFAULT_DRIFT_CAP,
    radius_max: float = DEFAULT_RADIUS_MAX,
) -> Trajectory:
    """Explicit Euler-Maruyama along the path's dyadic time grid."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    if x0.shape != (path.dim,):
        raise ValueError(f"x0 must have shape ({path.dim},)")
    diff = _Diffusion(diffusion, path.dim)
    states, exit_index = _drift_accumulate(
        drift, diff, x0, path.values[None], path.dt, drift_cap, radius_max
    )
    idx = int(exit_index[0])
    return Trajectory(path.times, states[0], idx >= 0, idx if idx >= 0 else None)


# ---------------------------------------------------------------------------
# Monte-Carlo aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    n: int
    seed_range: tuple[int, int, int]  # (seed, first path index, last path index)

    def csv_row(self) -> str:
        return f"{self.mean!r},{self.stderr!r},{self.n},{self.seed_range[0]}"


@dataclass
class _Moments:
    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def from_samples(cls, x: np.ndarray) -> "_Moments":
        x = np.asarray(x, dtype=np.float64)
        n = x.size
        # infinite samples (overflow probes) still merge; callers flag them
        with np.errstate(invalid="ignore"):
            mean = float(x.mean()) if n else 0.0
            m2 = float(np.sum((x - mean) ** 2)) if n else 0.0
        return cls(n, mean, m2)

    def merge(self, other: "_Moments") -> "_Moments":
        if self.n == 0:
            return other
        if other.n == 0:
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * other.n / n
        m2 = self.m2 + other.m2 + delta * delta * self.n * other.n / n
        return _Moments(n, mean, m2)

    def estimate(self, seed: int, lo: int, hi: int) -> MCEstimate:
        if self.n < 2:
            raise ValueError("need at least two samples for a standard error")
        std = math.sqrt(self.m2 / (self.n - 1))
        return MCEstimate(self.mean, std / math.sqrt(self.n), self.n, (seed, lo, hi))


def _batched_moments(worker, n: int, batch: int, threads: int) -> _Moments:
    """Apply ``worker(lo, hi) -> samples`` over fixed batches and merge in order."""
    spans = [(lo, min(lo + batch, n)) for lo in range(0, n, batch)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: _Moments.from_samples(worker(*s)), spans))
    else:
        results = [_Moments.from_samples(worker(lo, hi)) for lo, hi in spans]
    acc = _Moments()
    for m in results:
        acc = acc.merge(m)
    return acc


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CouplingTable:
    levels: tuple[int, ...]  # coarse level of each consecutive pair
    mean_errors: tuple[float, ...]
    included: tuple[int, ...]
    excluded: tuple[int, ...]
    rate: float

    def csv_rows(self) -> list[str]:
        rows = [
            f"{l},{e!r},{i},{x}"
            for l, e, i, x in zip(self.levels, self.mean_errors, self.included, self.excluded)
        ]
        rows.append(f"rate,{self.rate!r},,")
        return rows


def coupling_experiment(
    drift,
    diffusion,
    x0,
    seeds,
    levels,
    horizon: float,
    dim: int = 1,
    *,
    drift_cap: float = DEFAULT_DRIFT_CAP,
    radius_max: float = DEFAULT_RADIUS_MAX,
) -> CouplingTable:
    """Inter-level sup errors of Euler-Maruyama driven by one Brownian path.

    For every seed the path is built once at the finest level; coarser runs
    stride its values, so consecutive levels share their Brownian nodes
    exactly.  Pairs where either run explodes are excluded and counted.
    """
    levels = sorted(int(l) for l in levels)
    if len(levels) < 2:
        raise ValueError("need at least two levels")
    lmax = levels[-1]
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    diff = _Diffusion(diffusion, dim)

    W_full = np.stack(
        [sample_path(s, horizon, lmax, dim).values for s in seeds]
    )  # (B, 2^lmax + 1, d)

    runs = {}
    exits = {}
    for l in levels:
        stride = 1 << (lmax - l)
        W_l = W_full[:, ::stride]
        states, exit_index = _drift_accumulate(
            drift, diff, x0, W_l, horizon / (1 << l), drift_cap, radius_max
        )
        runs[l] = states
        exits[l] = exit_index

    pair_levels, pair_errors, pair_included, pair_excluded = [], [], [], []
    for lo, hi in zip(levels[:-1], levels[1:]):
        stride = 1 << (hi - lo)
        diffs = runs[lo] - runs[hi][:, ::stride]
        sup = np.max(np.linalg.norm(diffs, axis=-1), axis=-1)  # (B,)
        ok = (exits[lo] < 0) & (exits[hi] < 0)
        pair_levels.append(lo)
        pair_included.append(int(np.sum(ok)))
        pair_excluded.append(int(np.sum(~ok)))
        pair_errors.append(float(np.mean(sup[ok])) if np.any(ok) else math.nan)

    errs = np.asarray(pair_errors)
    if np.all(errs == 0.0):
        rate = math.inf
    elif np.any(errs <= 0.0) or np.any(~np.isfinite(errs)):
        rate = math.nan
    else:
        slope = np.polyfit(np.asarray(pair_levels, dtype=float), np.log2(errs), 1)[0]
        rate = float(-slope)
    return CouplingTable(
        tuple(pair_levels), tuple(pair_errors), tuple(pair_included), tuple(pair_excluded), rate
    )


@dataclass(frozen=True)
class KrylovReport:
    estimate: MCEstimate
    source_norm: float | None
    ratio: float | None
    excluded_nodes: int


def krylov_mc(
    f,
    drift,
    diffusion,
    x0,
    horizon: float,
    n: int,
    level: int,
    *,
    seed: int = 0,
    dim: int = 1,
    source_norm: float | None = None,
    drift_cap: float = DEFAULT_DRIFT_CAP,
    radius_max: float = DEFAULT_RADIUS_MAX,
    batch: int = 1000,
    threads: int = 1,
) -> KrylovReport:
    """Estimate E int_0^T |f(s, X_s)| ds by trapezoid sums along paths.

    Nodes where f evaluates non-finite contribute zero (they carry no
    measure in the continuum limit); the count of such nodes is reported.
    """
    if n < 100:
        raise ValueError("need n >= 100 samples for a meaningful standard error")
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    diff = _Diffusion(diffusion, dim)
    steps = 1 << level
    dt = horizon / steps
    times = np.linspace(0.0, horizon, steps + 1)
    weights = np.full(steps + 1, dt)
    weights[0] = weights[-1] = 0.5 * dt
    dropped = [0]

    def worker(lo: int, hi: int) -> np.ndarray:
        W = _paths_values(seed, range(lo, hi), horizon, level, dim)
        states, _ = _drift_accumulate(drift, diff, x0, W, dt, drift_cap, radius_max)
        vals = np.abs(np.asarray(f(times[None, :], states), dtype=np.float64))
        bad = ~np.isfinite(vals)
        if np.any(bad):
            dropped[0] += int(np.sum(bad))
            vals = np.where(bad, 0.0, vals)
        return vals @ weights

    mom = _batched_moments(worker, n, batch, threads)
    est = mom.estimate(seed, 0, n - 1)
    ratio = est.mean / source_norm if source_norm else None
    return KrylovReport(est, source_norm, ratio, dropped[0])


def girsanov_weight(
    drift,
    diffusion,
    x0,
    horizon: float,
    n: int,
    level: int,
    *,
    seed: int = 0,
    dim: int = 1,
    drift_cap: float = DEFAULT_DRIFT_CAP,
    batch: int = 1000,
    threads: int = 1,
) -> MCEstimate:
    """Monte-Carlo mean of the drift-removal exponential weight.

    Paths follow the driftless dynamics dY = sigma dW; the stochastic
    integral uses the left-point rule and the quadratic compensator a
    left-point Riemann sum, so the discrete weight is an exact martingale
    and its mean is 1 for any capped drift.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    diff = _Diffusion(diffusion, dim)
    steps = 1 << level
    dt = horizon / steps

    def worker(lo: int, hi: int) -> np.ndarray:
        W = _paths_values(seed, range(lo, hi), horizon, level, dim)
        states, _ = _drift_accumulate(None, diff, x0, W, dt, drift_cap, math.inf)
        log_w = np.zeros(W.shape[0])
        for j in range(steps):
            t = j * dt
            Xj = states[:, j]
            bv = _eval_drift(drift, t, Xj, drift_cap)
            sig = diff.matrix(t, Xj)
            det = np.linalg.det(sig)
            if np.any(np.abs(det) < 1e-14):
                raise np.linalg.LinAlgError(f"singular diffusion matrix at step {j}")
            s_inv = np.linalg.inv(sig)
            dW = W[:, j + 1] - W[:, j]
            # b^T sigma^{-1} dW
            log_w -= np.einsum("bi,bij,bj->b", bv, s_inv, dW)
            a_inv = np.einsum("bji,bjk->bik", s_inv, s_inv)  # (sigma sigma^T)^{-1}
            log_w -= 0.5 * dt * np.einsum("bi,bij,bj->b", bv, a_inv, bv)
        return np.exp(log_w)

    mom = _batched_moments(worker, n, batch, threads)
    return mom.estimate(seed, 0, n - 1)


@dataclass(frozen=True)
class KhasminskiiReport:
    estimate: MCEstimate
    overflowed: bool
    kappa: float
    drift_cap: float


def khasminskii_functional(
    drift,
    diffusion,
    x0,
    horizon: float,
    kappa: float,
    n: int,
    level: int,
    *,
    seed: int = 0,
    dim: int = 1,
    drift_cap: float = DEFAULT_DRIFT_CAP,
    batch: int = 1000,
    threads: int = 1,
) -> KhasminskiiReport:
    """Monte-Carlo mean of exp(kappa * int |b(s, Y_s)|^2 ds) along driftless paths.

    Overflowing samples flag the estimate as infinite: numerical evidence
    that the exponential-moment condition fails at this cap and kappa.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    diff = _Diffusion(diffusion, dim)
    steps = 1 << level
    dt = horizon / steps
    times = np.linspace(0.0, horizon, steps + 1)
    weights = np.full(steps + 1, dt)
    weights[0] = weights[-1] = 0.5 * dt
    overflowed = [False]

    def worker(lo: int, hi: int) -> np.ndarray:
        W = _paths_values(seed, range(lo, hi), horizon, level, dim)
        states, _ = _drift_accumulate(None, diff, x0, W, dt, drift_cap, math.inf)
        sq = np.zeros(W.shape[:2])
        for j in range(steps + 1):
            bv = _eval_drift(drift, times[j], states[:, j], drift_cap)
            sq[:, j] = np.sum(bv * bv, axis=-1)
        with np.errstate(over="ignore"):
            out = np.exp(kappa * (sq @ weights))
        if not np.all(np.isfinite(out)):
            overflowed[0] = True
        return out

    mom = _batched_moments(worker, n, batch, threads)
    if overflowed[0]:
        est = MCEstimate(math.inf, math.inf, n, (seed, 0, n - 1))
    else:
        est = mom.estimate(seed, 0, n - 1)
    return KhasminskiiReport(est, overflowed[0], kappa, drift_cap)


def zvonkin_simulate(
    zmap: ZvonkinMap,
    sigma,
    x0,
    path: BrownianPath,
    *,
    radius_max: float = DEFAULT_RADIUS_MAX,
) -> Trajectory:
    """Simulate via the drift-removing map: Y is driftless, X = Phi^{-1}(t, Y).

    When the correction field vanishes identically the map is the identity
    and the run delegates to plain Euler-Maruyama (bit-identical output).
    """
    if not zmap.certificate:
        raise ValueError("zvonkin_simulate requires a certified map")
    if max(s.max_abs() for s in zmap.u.slices) == 0.0:
        return euler_maruyama(None, sigma, x0, path, radius_max=radius_max)

    d = path.dim
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    diff = _Diffusion(sigma, d)
    times = path.times
    eye = np.eye(d)

    Y = np.atleast_2d(zmap.phi_at(0.0, x0))
    states = np.empty((path.steps + 1, d))
    X = np.atleast_2d(x0)
    states[0] = x0
    exploded = False
    exit_index: int | None = None

    for j in range(path.steps):
        t = float(times[j])
        jac = eye + np.atleast_3d(zmap.grad_u.evaluate(t, X)).reshape(X.shape + (d,))
        psi = np.einsum("...ij,...jk->...ik", diff.matrix(t, X), jac)
        dW = path.values[j + 1] - path.values[j]
        Y = Y + np.einsum("...ij,...j->...i", psi, dW)
        t_next = float(times[j + 1])
        X = np.atleast_2d(zmap.phi_inv(t_next, Y[0]))
        states[j + 1] = X[0]
        if np.linalg.norm(X[0]) > radius_max:
            exploded = True
            exit_index = j + 1
            states[j + 2 :] = X[0]
            break

    return Trajectory(times, states, exploded, exit_index)
