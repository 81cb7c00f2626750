"""Drift-removing change of variables for singular-drift SDE experiments.

The map Phi(t, x) = x + u(t, x) is built from one backward parabolic solve
per drift component (source = that component, terminal value zero).  When
the gradient of u stays below the certification threshold eta (default 1/2),
Phi is a node-wise diffeomorphism: grad Phi = I + grad u is invertible with
||(grad Phi)^-1|| <= 2, and the transformed process Y = Phi(t, X) is driven
by the diffusion Psi = sigma . grad Phi with no drift term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import (
    GridFunction,
    SpaceTimeField,
    TensorGrid,
    gradient,
    write_gfd,
)
from .parabolic import DiffusionCoefficient, solve_forward

__all__ = [
    "ZvonkinMap",
    "CertificationError",
    "InversionError",
    "build_map",
    "shrink_horizon",
    "transformed_diffusion",
    "export_map",
]


class CertificationError(RuntimeError):
    """No horizon below the requested minimum certifies the gradient bound."""


class InversionError(RuntimeError):
    """Newton inversion failed under a valid certificate (internal inconsistency)."""


def _as_spacetime(field, horizon: float, steps: int) -> SpaceTimeField:
    if isinstance(field, SpaceTimeField):
        if field.steps != steps or abs(field.horizon - horizon) > 1e-12:
            raise ValueError("coefficient field must live on the requested time grid")
        return field
    return SpaceTimeField.constant_in_time(field, horizon, steps)


def _diffusion_matrix(sigma: SpaceTimeField) -> DiffusionCoefficient:
    slices = tuple(
        GridFunction(
            s.grid,
            "matrix",
            np.einsum("...ij,...kj->...ik", s.samples, s.samples),
        )
        for s in sigma.slices
    )
    return DiffusionCoefficient(SpaceTimeField(sigma.horizon, slices))


@dataclass(frozen=True)
class ZvonkinMap:
    """Correction field u, its Jacobian data and the certification verdict.

    ``grad_phi`` holds I + grad u with Jacobian convention
    ``grad_phi[..., i, j] = d Phi^i / d x_j``; ``phi`` stores the node values
    x + u(t, x) for export.  ``grad_sup`` is the sup over time and nodes of
    the spectral norm of grad u.
    """

    u: SpaceTimeField
    horizon: float
    grad_sup: float
    phi: SpaceTimeField
    grad_phi: SpaceTimeField
    grad_u: SpaceTimeField
    certificate: bool
    eta: float
    residual: float

    @property
    def grid(self) -> TensorGrid:
        return self.u.grid

    def phi_at(self, t: float, x) -> np.ndarray:
        """Phi(t, x) = x + u(t, x), multilinear in space, linear in time."""
        x = np.asarray(x, dtype=np.float64)
        return x + self.u.evaluate(t, x)

    def phi_inv(self, t: float, y, *, tol: float = 1e-10, max_steps: int = 50) -> np.ndarray:
        """Damped Newton inversion of x -> Phi(t, x), started at y."""
        if not self.certificate:
            raise CertificationError("phi_inv requires a certified map")
        y = np.asarray(y, dtype=np.float64)
        single = y.ndim == 1
        pts = np.atleast_2d(y)
        x = pts.copy()
        scale = 1.0 + np.linalg.norm(pts, axis=-1, keepdims=True)

        def residual(xc):
            return xc + np.atleast_2d(self.u.evaluate(t, xc)) - pts

        eye = np.eye(pts.shape[-1])
        F = residual(x)
        for _ in range(max_steps):
            err = np.linalg.norm(F, axis=-1, keepdims=True)
            if np.all(err <= tol * scale):
                return x[0] if single else x
            # interpolating grad u and adding the identity afterwards keeps
            # the Jacobian exact for maps that are exactly affine
            J = eye + np.atleast_3d(self.grad_u.evaluate(t, x)).reshape(x.shape + (x.shape[-1],))
            step = np.linalg.solve(J, F[..., None])[..., 0]
            trial = x - step
            F_trial = residual(trial)
            # halve the step where the residual got worse
            for _ in range(4):
                worse = np.linalg.norm(F_trial, axis=-1) > np.linalg.norm(F, axis=-1)
                if not np.any(worse):
                    break
                step = np.where(worse[..., None], 0.5 * step, step)
                trial = x - step
                F_trial = residual(trial)
            x, F = trial, F_trial
        raise InversionError(
            f"Newton failed to invert the map at t = {t} within {max_steps} steps "
            f"(max residual {float(np.max(np.linalg.norm(F, axis=-1))):.3e})"
        )

    def inverse_gradient_bounds(self) -> tuple[float, float]:
        """Node-wise range of ||(grad Phi)^-1||_2 over all slices."""
        lo, hi = math.inf, -math.inf
        for s in self.grad_phi.slices:
            inv = np.linalg.inv(s.samples)
            svals = np.linalg.svd(inv, compute_uv=False)
            norms = svals[..., 0]
            lo = min(lo, float(norms.min()))
            hi = max(hi, float(norms.max()))
        return lo, hi


def build_map(
    sigma,
    b,
    horizon: float,
    steps: int | None = None,
    *,
    eta: float = 0.5,
    tol: float = 1e-9,
) -> ZvonkinMap:
    """Solve the correction equation for every drift component and assemble Phi.

    ``sigma`` is matrix-valued (GridFunction or SpaceTimeField), ``b``
    vector-valued on the time grid of the solve.  The backward problem with
    terminal value zero is run as a forward solve of the time-reversed
    coefficients.
    """
    if isinstance(b, SpaceTimeField):
        steps = b.steps if steps is None else steps
    if steps is None:
        raise ValueError("steps must be given when the drift is time-constant")
    b_field = _as_spacetime(b, horizon, steps)
    if b_field.codomain != "vector":
        raise ValueError("drift must be vector-valued")
    for s in b_field.slices:
        s.assert_finite("drift")
    sigma_field = _as_spacetime(sigma, horizon, steps)
    if sigma_field.codomain != "matrix":
        raise ValueError("sigma must be matrix-valued")

    grid = b_field.grid
    d = grid.dim
    a_rev = _diffusion_matrix(SpaceTimeField(horizon, tuple(reversed(sigma_field.slices))))
    b_rev = b_field.time_reversed()

    comp_fields = []
    residual = 0.0
    for i in range(d):
        src = b_rev.map(lambda s: GridFunction(grid, "scalar", s.samples[..., i]))
        rep = solve_forward(a_rev, src, b_rev, tol=tol)
        residual = max(residual, rep.residual)
        comp_fields.append(rep.solution.time_reversed())

    u_slices = []
    phi_slices = []
    jac_slices = []
    jac_u_slices = []
    nodes = grid.nodes()
    eye = np.eye(d)
    grad_sup = 0.0
    for k in range(steps + 1):
        u_k = np.stack([comp_fields[i].slices[k].samples for i in range(d)], axis=-1)
        u_slices.append(GridFunction(grid, "vector", u_k))
        phi_slices.append(GridFunction(grid, "vector", nodes + u_k))
        rows = [
            gradient(GridFunction(grid, "scalar", u_k[..., i])).samples for i in range(d)
        ]
        jac_u = np.stack(rows, axis=-2)  # [..., i, j] = d_j u^i
        if d == 1:
            grad_sup = max(grad_sup, float(np.max(np.abs(jac_u))))
        else:
            svals = np.linalg.svd(jac_u, compute_uv=False)
            grad_sup = max(grad_sup, float(svals[..., 0].max()))
        jac_u_slices.append(GridFunction(grid, "matrix", jac_u))
        jac_slices.append(GridFunction(grid, "matrix", eye + jac_u))

    return ZvonkinMap(
        u=SpaceTimeField(horizon, tuple(u_slices)),
        horizon=horizon,
        grad_sup=grad_sup,
        phi=SpaceTimeField(horizon, tuple(phi_slices)),
        grad_phi=SpaceTimeField(horizon, tuple(jac_slices)),
        grad_u=SpaceTimeField(horizon, tuple(jac_u_slices)),
        certificate=grad_sup <= eta,
        eta=eta,
        residual=residual,
    )


def shrink_horizon(
    sigma,
    b,
    horizon: float,
    steps: int,
    *,
    eta: float = 0.5,
    min_horizon_factor: float = 2.0**-10,
    tol: float = 1e-9,
) -> ZvonkinMap:
    """Halve the horizon until the gradient certificate holds, then bisect once.

    Coefficient fields are given on [0, horizon]; restrictions reuse their
    leading slices so the time step stays fixed.  Raises CertificationError
    when no horizon above ``min_horizon_factor * horizon`` certifies.
    """
    b_field = _as_spacetime(b, horizon, steps)
    sigma_field = _as_spacetime(sigma, horizon, steps)
    t_min = min_horizon_factor * horizon

    def attempt(n_steps: int) -> ZvonkinMap:
        T = n_steps * b_field.dt
        return build_map(
            sigma_field.restricted(n_steps),
            b_field.restricted(n_steps),
            T,
            n_steps,
            eta=eta,
            tol=tol,
        )

    n = steps
    zmap = attempt(n)
    if zmap.certificate:
        return zmap
    fail_n = n
    while True:
        n //= 2
        if n < 4 or n * b_field.dt < t_min:
            raise CertificationError(
                f"gradient bound {eta} not certified above T = {t_min:g} "
                f"(last grad_sup = {zmap.grad_sup:.4g})"
            )
        zmap = attempt(n)
        if zmap.certificate:
            break
        fail_n = n
    # one bisection refinement between the passing and failing horizons
    mid = (n + fail_n) // 2
    if mid > n:
        candidate = attempt(mid)
        if candidate.certificate:
            return candidate
    return zmap


def transformed_diffusion(zmap: ZvonkinMap, sigma) -> SpaceTimeField:
    """Psi = sigma . grad Phi node-wise; the transformed process has no drift."""
    if not zmap.certificate:
        raise CertificationError("transformed diffusion requires a certified map")
    sigma_field = _as_spacetime(sigma, zmap.horizon, zmap.u.steps)
    slices = tuple(
        GridFunction(
            zmap.grid,
            "matrix",
            np.einsum("...ij,...jk->...ik", s.samples, j.samples),
        )
        for s, j in zip(sigma_field.slices, zmap.grad_phi.slices)
    )
    return SpaceTimeField(zmap.horizon, slices)


def export_map(zmap: ZvonkinMap, sigma, directory) -> None:
    """Write the map bundle (u, Phi, grad Phi, Psi) plus a text manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_gfd(directory / "u.gfd", zmap.u)
    write_gfd(directory / "phi.gfd", zmap.phi)
    write_gfd(directory / "grad_phi.gfd", zmap.grad_phi)
    write_gfd(directory / "psi.gfd", transformed_diffusion(zmap, sigma))
    manifest = (
        f"horizon = {zmap.horizon!r}\n"
        f"eta = {zmap.eta!r}\n"
        f"grad_sup = {zmap.grad_sup!r}\n"
        f"certificate = {str(zmap.certificate).lower()}\n"
        f"residual = {zmap.residual!r}\n"
    )
    (directory / "manifest.txt").write_text(manifest)
