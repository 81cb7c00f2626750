"""Spectral solver for the forward and dual parabolic problems on the torus.

Forward problem:  du/dt = (1/2) a^ij d_ij u + b . grad u + f,   u(0) = 0.
Dual problem:     dw/dt + (1/2) d_ij (a^ij w) + f = 0,          w(T) = 0,
integrated backward (internally: time-reversed forward solve).

Time stepping is Crank-Nicolson on the frozen part (1/2) dbar Laplacian,
with dbar the mean diffusion trace, so the implicit solve is a single
Fourier-multiplier division.  The spatially varying remainder, the drift
term and the source are folded in through a per-step fixed-point iteration
that is run until the discrete equation defect (per unit time, in L2) drops
below the solver tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grid import GridFunction, SpaceTimeField, TensorGrid, gradient, hessian
from .norms import (
    INF,
    MixedExponent,
    check_subcritical,
    mixed_spacetime_norm,
    spacetime_bessel_norm,
    sup_norm,
)

__all__ = [
    "DiffusionCoefficient",
    "SolveReport",
    "SolverConvergenceError",
    "EllipticityError",
    "solve_forward",
    "solve_dual",
    "heat_kernel",
    "forward_regularity_ratios",
    "dual_regularity_ratio",
    "small_time_decay",
]


class SolverConvergenceError(RuntimeError):
    """The per-step fixed point failed to contract to tolerance."""

    def __init__(self, step: int, defect: float, contraction: float):
        self.step = step
        self.defect = defect
        self.contraction = contraction
        super().__init__(
            f"fixed point stalled at step {step}: defect/dt = {defect:.3e}, "
            f"contraction estimate {contraction:.3f}; refine the grid or use more steps"
        )


class EllipticityError(ValueError):
    """Diffusion matrix violates the two-sided ellipticity bound."""


@dataclass(frozen=True)
class DiffusionCoefficient:
    """Symmetric matrix diffusion a = sigma sigma^T with a two-sided bound.

    Eigenvalues of every nodal matrix must lie in [1/delta, delta].  The
    field may be a single matrix-valued GridFunction (constant in time) or a
    SpaceTimeField sampled on the solver's time grid.
    """

    coeff: object  # GridFunction | SpaceTimeField, matrix-valued
    delta: float | None = None
    modulus: tuple = field(default=())

    def __post_init__(self):
        slices = self._all_slices()
        for s in slices:
            if s.codomain != "matrix":
                raise ValueError("diffusion coefficient must be matrix-valued")
            asym = np.max(np.abs(s.samples - np.swapaxes(s.samples, -1, -2)))
            if asym > 1e-12:
                raise ValueError(f"diffusion matrix is not symmetric (max asymmetry {asym:.2e})")
        lo, hi = self._eigen_range(slices)
        if lo <= 0:
            raise EllipticityError(f"diffusion matrix not positive definite (lambda_min = {lo:.3e})")
        fitted = max(hi, 1.0 / lo) * (1.0 + 1e-12)
        if self.delta is None:
            object.__setattr__(self, "delta", max(fitted, 1.0 + 1e-9))
        elif lo < 1.0 / self.delta - 1e-12 or hi > self.delta + 1e-12:
            raise EllipticityError(
                f"grid eigenvalues [{lo:.6g}, {hi:.6g}] escape [1/delta, delta] "
                f"for delta = {self.delta}"
            )

    def _all_slices(self) -> list[GridFunction]:
        if isinstance(self.coeff, SpaceTimeField):
            return list(self.coeff.slices)
        return [self.coeff]

    @staticmethod
    def _eigen_range(slices) -> tuple[float, float]:
        lo, hi = np.inf, -np.inf
        for s in slices:
            ev = np.linalg.eigvalsh(s.samples)
            lo = min(lo, float(ev.min()))
            hi = max(hi, float(ev.max()))
        return lo, hi

    @classmethod
    def identity(cls, grid: TensorGrid, scale: float = 1.0) -> "DiffusionCoefficient":
        eye = np.broadcast_to(scale * np.eye(grid.dim), grid.points + (grid.dim, grid.dim))
        return cls(GridFunction(grid, "matrix", eye))

    @classmethod
    def from_function(cls, grid: TensorGrid, fn, delta: float | None = None) -> "DiffusionCoefficient":
        return cls(GridFunction.from_function(grid, fn, "matrix"), delta)

    @property
    def grid(self) -> TensorGrid:
        return self._all_slices()[0].grid

    def slice_at(self, k: int, steps: int, horizon: float) -> np.ndarray:
        if isinstance(self.coeff, SpaceTimeField):
            if self.coeff.steps != steps or abs(self.coeff.horizon - horizon) > 1e-12:
                raise ValueError("time-varying diffusion must share the solver time grid")
            return self.coeff.slices[k].samples
        return self.coeff.samples

    def mean_trace(self) -> float:
        vals = [float(np.mean(np.trace(s.samples, axis1=-2, axis2=-1))) for s in self._all_slices()]
        return sum(vals) / (len(vals) * self.grid.dim)

    def continuity_modulus(self, shifts: Sequence[int] = (1, 2, 4)) -> tuple:
        """Sampled modulus: max |a(x+r e_i) - a(x)| for dyadic node shifts."""
        rows = []
        for s in shifts:
            worst = 0.0
            for sl in self._all_slices():
                for axis in range(self.grid.dim):
                    rolled = np.roll(sl.samples, -s, axis=axis)
                    worst = max(worst, float(np.max(np.abs(rolled - sl.samples))))
            rows.append((s, worst))
        return tuple(rows)


@dataclass
class SolveReport:
    """Solution field plus the diagnostics every experiment serializes."""

    solution: SpaceTimeField
    residual: float
    horizon: float
    time_steps: int
    grid_points: tuple[int, ...]
    max_iterations: int
    ratios: list = field(default_factory=list)
    modulus: tuple = field(default=())

    def csv_rows(self) -> list[str]:
        rows = [
            f"residual,{self.residual!r}",
            f"horizon,{self.horizon!r}",
            f"time_steps,{self.time_steps}",
            f"grid,{'x'.join(str(n) for n in self.grid_points)}",
            f"max_iterations,{self.max_iterations}",
        ]
        rows += [f"{name},{value!r}" for name, value in self.ratios]
        rows += [f"modulus_shift_{s},{v!r}" for s, v in self.modulus]
        return rows


class _Stepper:
    """Shared Crank-Nicolson/fixed-point engine for both problems."""

    def __init__(self, a: DiffusionCoefficient, grid: TensorGrid, steps: int, horizon: float,
                 divergence_form: bool, tol: float, max_iter: int):
        self.a = a
        self.grid = grid
        self.steps = steps
        self.horizon = horizon
        self.dt = horizon / steps
        self.divergence_form = divergence_form
        self.tol = tol
        self.max_iter = max_iter

        xi = grid.frequency_mesh()
        self.xi = xi
        self.xi2 = sum(x**2 for x in xi)
        self.dbar = a.mean_trace()
        self.den = 1.0 + 0.25 * self.dt * self.dbar * self.xi2
        self.cell = grid.cell_volume
        d = grid.dim
        self.pairs = [(i, j) for i in range(d) for j in range(i, d)]

    def _l2(self, v: np.ndarray) -> float:
        return float(np.sqrt(np.sum(v * v) * self.cell))

    def _deviation(self, k: int) -> np.ndarray:
        a_k = self.a.slice_at(k, self.steps, self.horizon)
        dev = np.array(a_k, dtype=np.float64)
        idx = np.arange(self.grid.dim)
        dev[..., idx, idx] -= self.dbar
        return dev

    def frozen_part(self, vhat: np.ndarray) -> np.ndarray:
        return np.real(np.fft.ifftn(-0.5 * self.dbar * self.xi2 * vhat))

    def variable_part(self, k: int, v: np.ndarray, b_k: np.ndarray | None) -> np.ndarray:
        """N(t_k, v): variable second-order part plus the drift term."""
        dev = self._deviation(k)
        if self.divergence_form:
            # (1/2) d_ij ((a^ij - dbar delta_ij) v): products first, sum in Fourier
            acc = None
            for (i, j) in self.pairs:
                w = 1.0 if i == j else 2.0
                prod_hat = np.fft.fftn(dev[..., i, j] * v)
                term = -w * self.xi[i] * self.xi[j] * prod_hat
                acc = term if acc is None else acc + term
            out = 0.5 * np.real(np.fft.ifftn(acc))
        else:
            vhat = np.fft.fftn(v)
            out = np.zeros_like(v)
            for (i, j) in self.pairs:
                w = 1.0 if i == j else 2.0
                d_ij = np.real(np.fft.ifftn(-self.xi[i] * self.xi[j] * vhat))
                out += 0.5 * w * dev[..., i, j] * d_ij
            if b_k is not None:
                for axis in range(self.grid.dim):
                    freq = self.xi[axis].copy()
                    # zero the unpaired Nyquist mode of the first derivative
                    N = self.grid.points[axis]
                    sl = [slice(None)] * self.grid.dim
                    sl[axis] = N // 2
                    mult = 1j * freq
                    mult[tuple(sl)] = 0.0
                    dv = np.real(np.fft.ifftn(mult * vhat))
                    out += b_k[..., axis] * dv
        return out

    def run(self, source: SpaceTimeField, drift: SpaceTimeField | None,
            initial: np.ndarray | None) -> tuple[SpaceTimeField, float, int]:
        grid, dt = self.grid, self.dt
        u = np.zeros(grid.points) if initial is None else np.array(initial, dtype=np.float64)
        slices = [GridFunction(grid, "scalar", u)]
        b_at = (lambda k: drift.slices[k].samples) if drift is not None else (lambda k: None)
        f_at = lambda k: source.slices[k].samples

        uhat = np.fft.fftn(u)
        Au = self.frozen_part(uhat)
        Nu = self.variable_part(0, u, b_at(0))
        worst_defect = 0.0
        worst_iters = 0

        for k in range(self.steps):
            rhs0 = u + 0.5 * dt * (Au + Nu + f_at(k) + f_at(k + 1))
            v = u
            Nv = self.variable_part(k + 1, v, b_at(k + 1))
            prev_defect = None
            for it in range(self.max_iter):
                vhat = np.fft.fftn(rhs0 + 0.5 * dt * Nv) / self.den
                v_new = np.real(np.fft.ifftn(vhat))
                Nv_new = self.variable_part(k + 1, v_new, b_at(k + 1))
                # defect of the discrete equation at v_new is (dt/2)(N(v_new) - N(v));
                # tracked per unit time, so the dt cancels
                defect = 0.5 * self._l2(Nv_new - Nv)
                v, Nv = v_new, Nv_new
                if defect < self.tol:
                    worst_iters = max(worst_iters, it + 1)
                    break
                if prev_defect is not None and defect > prev_defect and defect > 100 * self.tol:
                    raise SolverConvergenceError(k, defect, defect / prev_defect)
                prev_defect = defect
            else:
                raise SolverConvergenceError(
                    k, defect, defect / prev_defect if prev_defect else math.inf
                )
            worst_defect = max(worst_defect, defect)
            u = v
            Au = self.frozen_part(vhat)  # vhat is the accepted iterate's transform
            Nu = Nv
            slices.append(GridFunction(grid, "scalar", u))

        return SpaceTimeField(self.horizon, tuple(slices)), worst_defect, worst_iters


def _validate_inputs(a: DiffusionCoefficient, f: SpaceTimeField, b: SpaceTimeField | None):
    if f.codomain != "scalar":
        raise ValueError("source must be scalar-valued")
    if a.grid != f.grid:
        raise ValueError("diffusion and source live on different grids")
    if b is not None:
        if b.codomain != "vector":
            raise ValueError("drift must be vector-valued")
        if b.grid != f.grid or b.steps != f.steps or abs(b.horizon - f.horizon) > 1e-12:
            raise ValueError("drift must share the source's grid and time grid")
        for s in b.slices:
            s.assert_finite("drift")


def solve_forward(
    a: DiffusionCoefficient,
    f: SpaceTimeField,
    b: SpaceTimeField | None = None,
    *,
    tol: float = 1e-9,
    max_iter: int = 50,
) -> SolveReport:
    """Integrate the forward problem from a zero initial slice."""
    _validate_inputs(a, f, b)
    stepper = _Stepper(a, f.grid, f.steps, f.horizon, False, tol, max_iter)
    u, residual, iters = stepper.run(f, b, None)
    return SolveReport(u, residual, f.horizon, f.steps, f.grid.points, iters,
                       modulus=a.continuity_modulus())


def solve_dual(
    a: DiffusionCoefficient,
    f: SpaceTimeField,
    *,
    terminal: GridFunction | None = None,
    tol: float = 1e-9,
    max_iter: int = 50,
) -> SolveReport:
    """Integrate the divergence-form dual problem backward from w(T).

    ``terminal`` defaults to zero; a nonzero value is the mass-conservation
    test mode.  Internally the equation is reparameterized by t -> T - t and
    run through the forward stepper.
    """
    _validate_inputs(a, f, None)
    a_rev = a
    if isinstance(a.coeff, SpaceTimeField):
        a_rev = DiffusionCoefficient(a.coeff.time_reversed(), a.delta)
    f_rev = f.time_reversed()
    stepper = _Stepper(a_rev, f.grid, f.steps, f.horizon, True, tol, max_iter)
    init = None if terminal is None else terminal.samples
    w_rev, residual, iters = stepper.run(f_rev, None, init)
    w = w_rev.time_reversed()
    return SolveReport(w, residual, f.horizon, f.steps, f.grid.points, iters,
                       modulus=a.continuity_modulus())


# ---------------------------------------------------------------------------
# frozen-coefficient Gaussian kernel
# ---------------------------------------------------------------------------


def heat_kernel(a_z: np.ndarray, s: float, t: float, z) -> np.ndarray:
    """Transition density of the frozen-coefficient problem.

    For a constant SPD matrix ``a_z`` the covariance accumulated between
    times s < t is (t - s) a_z and the kernel is the corresponding centered
    Gaussian density evaluated at the displacement ``z``.
    """
    if t <= s:
        raise ValueError(f"need t > s, got s = {s}, t = {t}")
    a_z = np.atleast_2d(np.asarray(a_z, dtype=np.float64))
    d = a_z.shape[0]
    ev = np.linalg.eigvalsh(a_z)
    if ev.min() <= 0:
        raise ValueError("frozen coefficient matrix must be SPD")
    cov = (t - s) * a_z
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    pts = np.atleast_2d(z)
    sol = np.linalg.solve(cov, pts.T).T
    quad = np.sum(pts * sol, axis=-1)
    norm = math.sqrt((2.0 * math.pi) ** d * float(np.linalg.det(cov)))
    out = np.exp(-0.5 * quad) / norm
    return out[0] if single else out


# ---------------------------------------------------------------------------
# estimate probes
# ---------------------------------------------------------------------------


def _time_derivative(u: SpaceTimeField) -> SpaceTimeField:
    # backward differences on the stored slices; first slice copies the next
    dt = u.dt
    diffs = [
        GridFunction(u.grid, u.codomain, (b.samples - a.samples) / dt)
        for a, b in zip(u.slices[:-1], u.slices[1:])
    ]
    return SpaceTimeField(u.horizon, tuple([diffs[0]] + diffs))


def forward_regularity_ratios(report: SolveReport, f: SpaceTimeField, e: MixedExponent) -> list:
    """Norm ratios ||hess u|| / ||f|| and ||du/dt|| / ||f|| in the mixed norm."""
    denom = mixed_spacetime_norm(f, e)
    if denom == 0.0:
        raise ValueError("source has zero mixed norm")
    u = report.solution
    hess_field = u.map(hessian)
    ratios = [
        ("hess_ratio", mixed_spacetime_norm(hess_field, e) / denom),
        ("dt_ratio", mixed_spacetime_norm(_time_derivative(u), e) / denom),
    ]
    report.ratios.extend(ratios)
    return ratios


def dual_regularity_ratio(report: SolveReport, f: SpaceTimeField, e: MixedExponent) -> list:
    """||w|| in the mixed norm against the order -2 source norm."""
    denom = spacetime_bessel_norm(f, -2.0, e)
    if denom == 0.0:
        raise ValueError("source has zero order -2 norm")
    ratios = [("dual_ratio", mixed_spacetime_norm(report.solution, e) / denom)]
    report.ratios.extend(ratios)
    return ratios


def small_time_decay(
    a: DiffusionCoefficient,
    family: Sequence[GridFunction],
    e: MixedExponent,
    alphas: Sequence[float],
    horizons: Sequence[float] = (1.0, 0.5, 0.25, 0.125),
    *,
    steps_per_unit: int = 128,
    variants: Sequence[str] = ("sup", "grad_sup"),
    tol: float = 1e-9,
) -> dict:
    """Ratio tables ||u|| / ||f|| for shrinking horizons.

    For every horizon the (time-constant) members of ``family`` are used as
    sources; the table rows hold the max ratio over the family for every
    requested fractional order alpha and for the sup-norm variants.  Members
    with zero norm are excluded and counted.
    """
    if e.q != INF:
        limit = 2.0 - 2.0 / float(e.q)
    else:
        limit = 2.0
    for alpha in alphas:
        if not 0.0 <= alpha < limit:
            raise ValueError(f"alpha = {alpha} outside admissible range [0, {limit})")
    if "grad_sup" in variants and not check_subcritical(e, 1).ok:
        raise ValueError("gradient sup variant requires subcriticality at threshold 1")
    if "sup" in variants and not check_subcritical(e, 2).ok:
        raise ValueError("sup variant requires subcriticality at threshold 2")

    table: dict = {"horizons": list(horizons), "excluded": 0}
    rows: dict = {f"alpha={alpha:g}": [] for alpha in alphas}
    rows.update({name: [] for name in variants})

    for T in horizons:
        steps = max(8, int(round(T * steps_per_unit)))
        worst: dict = {key: 0.0 for key in rows}
        for g in family:
            F = SpaceTimeField.constant_in_time(g, T, steps)
            denom = mixed_spacetime_norm(F, e)
            if denom == 0.0:
                table["excluded"] += 1
                continue
            u = solve_forward(a, F, tol=tol).solution
            for alpha in alphas:
                val = spacetime_bessel_norm(u, alpha, MixedExponent(e.p, INF)) / denom
                key = f"alpha={alpha:g}"
                worst[key] = max(worst[key], val)
            if "sup" in variants:
                worst["sup"] = max(worst["sup"], sup_norm(u) / denom)
            if "grad_sup" in variants:
                gs = max(gradient(s).magnitude().max_abs() for s in u.slices)
                worst["grad_sup"] = max(worst["grad_sup"], gs / denom)
        for key in rows:
            rows[key].append(worst[key])
    table["rows"] = rows
    return table
