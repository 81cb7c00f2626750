"""Periodic tensor grids and sampled fields.

Everything downstream (norms, solvers, path simulation) consumes the three
types defined here: ``TensorGrid`` describes a periodic box discretized with
a power-of-two number of nodes per axis, ``GridFunction`` holds scalar /
vector / matrix samples at the nodes, and ``SpaceTimeField`` stacks one
``GridFunction`` per node of a uniform time grid.

Spatial operators (differentiation, smoothing, fractional Laplacian powers)
are implemented as FFT multipliers, which are exact on the torus for
band-limited data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "TensorGrid",
    "GridFunction",
    "SpaceTimeField",
    "GridResolutionError",
    "mollify",
    "resolvable_mollifier_index",
    "bessel_apply",
    "gradient",
    "hessian",
    "laplacian",
    "random_band_limited",
    "write_gfd",
    "read_gfd",
]

_CODOMAINS = ("scalar", "vector", "matrix")


class GridResolutionError(ValueError):
    """A requested operation is not resolvable on the current grid."""


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class TensorGrid:
    """Uniform periodic grid on the box [0, L_1) x ... x [0, L_d).

    Node ``(j_1, ..., j_d)`` sits at ``x_i = j_i * h_i`` with
    ``h_i = L_i / N_i``.  Point counts must be powers of two so that every
    spectral operator reduces to an FFT of friendly length.
    """

    extent: tuple[float, ...]
    points: tuple[int, ...]

    def __post_init__(self):
        extent = tuple(float(L) for L in self.extent)
        points = tuple(int(N) for N in self.points)
        if len(extent) != len(points) or not extent:
            raise ValueError("extent and points must be non-empty and of equal length")
        if any(L <= 0 for L in extent):
            raise ValueError(f"extents must be positive, got {extent}")
        if any(not _is_power_of_two(N) for N in points):
            raise ValueError(f"point counts must be powers of two, got {points}")
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "points", points)

    @property
    def dim(self) -> int:
        return len(self.points)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / N for L, N in zip(self.extent, self.points))

    @property
    def node_count(self) -> int:
        return int(np.prod(self.points))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis_coordinates(self, axis: int) -> np.ndarray:
        h = self.spacing[axis]
        return np.arange(self.points[axis]) * h

    def meshgrid(self) -> list[np.ndarray]:
        axes = [self.axis_coordinates(i) for i in range(self.dim)]
        return list(np.meshgrid(*axes, indexing="ij"))

    def nodes(self) -> np.ndarray:
        """All node coordinates, shape ``(*points, dim)``."""
        return np.stack(self.meshgrid(), axis=-1)

    def frequencies(self) -> list[np.ndarray]:
        """Angular frequencies xi_i = 2*pi*k_i/L_i per axis (fftfreq layout)."""
        return [
            2.0 * np.pi * np.fft.fftfreq(N, d=h)
            for N, h in zip(self.points, self.spacing)
        ]

    def frequency_mesh(self) -> list[np.ndarray]:
        return list(np.meshgrid(*self.frequencies(), indexing="ij"))

    def wrap(self, x: np.ndarray) -> np.ndarray:
        """Wrap points into the fundamental domain [0, L_i)."""
        L = np.asarray(self.extent)
        return np.mod(x, L)


def _codomain_shape(codomain: str, dim: int) -> tuple[int, ...]:
    if codomain == "scalar":
        return ()
    if codomain == "vector":
        return (dim,)
    if codomain == "matrix":
        return (dim, dim)
    raise ValueError(f"codomain must be one of {_CODOMAINS}, got {codomain!r}")


@dataclass(frozen=True)
class GridFunction:
    """Samples of a scalar/vector/matrix field at the nodes of a TensorGrid.

    Immutable: the sample array is locked after construction, so instances
    can be shared freely across threads.
    """

    grid: TensorGrid
    codomain: str
    samples: np.ndarray = field(repr=False)

    def __post_init__(self):
        shape = self.grid.points + _codomain_shape(self.codomain, self.grid.dim)
        samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if samples.shape != shape:
            raise ValueError(
                f"sample shape {samples.shape} does not match grid/codomain shape {shape}"
            )
        samples = samples.copy()
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)

    # -- constructors ----------------------------------------------------

    @classmethod
    def from_function(
        cls, grid: TensorGrid, fn: Callable[[np.ndarray], np.ndarray], codomain: str = "scalar"
    ) -> "GridFunction":
        """Sample ``fn`` at the nodes; ``fn`` receives points of shape (..., d)."""
        values = np.asarray(fn(grid.nodes()), dtype=np.float64)
        target = grid.points + _codomain_shape(codomain, grid.dim)
        return cls(grid, codomain, np.broadcast_to(values, target))

    @classmethod
    def constant(cls, grid: TensorGrid, value, codomain: str = "scalar") -> "GridFunction":
        target = grid.points + _codomain_shape(codomain, grid.dim)
        return cls(grid, codomain, np.broadcast_to(np.asarray(value, dtype=np.float64), target))

    @classmethod
    def zeros(cls, grid: TensorGrid, codomain: str = "scalar") -> "GridFunction":
        return cls.constant(grid, 0.0, codomain)

    # -- basic queries ----------------------------------------------------

    @property
    def is_scalar(self) -> bool:
        return self.codomain == "scalar"

    def magnitude(self) -> "GridFunction":
        """Pointwise Euclidean (Frobenius) magnitude; identity-like for scalars."""
        if self.is_scalar:
            return GridFunction(self.grid, "scalar", np.abs(self.samples))
        axes = tuple(range(self.grid.dim, self.samples.ndim))
        mag = np.sqrt(np.sum(self.samples**2, axis=axes))
        return GridFunction(self.grid, "scalar", mag)

    def mean(self) -> float:
        return float(np.mean(self.samples))

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.samples)))

    def assert_finite(self, what: str = "field") -> None:
        if not np.all(np.isfinite(self.samples)):
            raise FloatingPointError(f"{what} contains non-finite samples")

    # -- arithmetic (returns new instances) -------------------------------

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "GridFunction":
        return GridFunction(self.grid, self.codomain, fn(self.samples))

    def __add__(self, other: "GridFunction") -> "GridFunction":
        return GridFunction(self.grid, self.codomain, self.samples + other.samples)

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        return GridFunction(self.grid, self.codomain, self.samples - other.samples)

    def __mul__(self, c: float) -> "GridFunction":
        return GridFunction(self.grid, self.codomain, self.samples * c)

    __rmul__ = __mul__

    # -- interpolation -----------------------------------------------------

    def evaluate(self, x) -> np.ndarray:
        """Multilinear periodic interpolation at points ``x`` of shape (..., d).

        Exact at grid nodes; constants are reproduced exactly.
        """
        grid = self.grid
        x = np.asarray(x, dtype=np.float64)
        scalar_input = x.ndim == 1
        pts = np.atleast_2d(x)
        if pts.shape[-1] != grid.dim:
            raise ValueError(f"points must have trailing dimension {grid.dim}")

        frac = pts / np.asarray(grid.spacing)
        base = np.floor(frac).astype(np.int64)
        w = frac - base  # in [0, 1)

        out = None
        # accumulate over the 2^d corners of the containing cell
        for corner in range(1 << grid.dim):
            weight = np.ones(pts.shape[:-1])
            idx = []
            for axis in range(grid.dim):
                bit = (corner >> axis) & 1
                idx.append(np.mod(base[..., axis] + bit, grid.points[axis]))
                weight = weight * (w[..., axis] if bit else (1.0 - w[..., axis]))
            vals = self.samples[tuple(idx)]
            weight = weight.reshape(weight.shape + (1,) * (vals.ndim - weight.ndim))
            out = vals * weight if out is None else out + vals * weight
        if scalar_input:
            out = out[0]
        return out


@dataclass(frozen=True)
class SpaceTimeField:
    """One GridFunction per node of a uniform time grid on [0, T].

    ``steps`` counts intervals, so there are ``steps + 1`` slices with
    slice ``k`` at time ``k * T / steps``.
    """

    horizon: float
    slices: tuple[GridFunction, ...]

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        slices = tuple(self.slices)
        if len(slices) < 2:
            raise ValueError("need at least one time step (two slices)")
        g0 = slices[0].grid
        if any(s.grid != g0 or s.codomain != slices[0].codomain for s in slices):
            raise ValueError("all slices must share one grid and codomain")
        object.__setattr__(self, "slices", slices)

    @classmethod
    def from_function(
        cls,
        grid: TensorGrid,
        horizon: float,
        steps: int,
        fn: Callable[[float, np.ndarray], np.ndarray],
        codomain: str = "scalar",
    ) -> "SpaceTimeField":
        times = np.linspace(0.0, horizon, steps + 1)
        nodes = grid.nodes()
        target = grid.points + _codomain_shape(codomain, grid.dim)
        slices = [
            GridFunction(grid, codomain, np.broadcast_to(np.asarray(fn(t, nodes), dtype=np.float64), target))
            for t in times
        ]
        return cls(horizon, tuple(slices))

    @classmethod
    def constant_in_time(cls, g: GridFunction, horizon: float, steps: int) -> "SpaceTimeField":
        return cls(horizon, tuple([g] * (steps + 1)))

    @property
    def grid(self) -> TensorGrid:
        return self.slices[0].grid

    @property
    def codomain(self) -> str:
        return self.slices[0].codomain

    @property
    def steps(self) -> int:
        return len(self.slices) - 1

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)

    def evaluate(self, t: float, x) -> np.ndarray:
        """Linear interpolation in time, multilinear in space."""
        s = min(max(t / self.dt, 0.0), float(self.steps))
        k = min(int(math.floor(s)), self.steps - 1)
        w = s - k
        lo = self.slices[k].evaluate(x)
        if w == 0.0:
            return lo
        hi = self.slices[k + 1].evaluate(x)
        return (1.0 - w) * lo + w * hi

    def restricted(self, steps: int) -> "SpaceTimeField":
        """First ``steps`` intervals as a field on [0, steps*dt]."""
        if not 1 <= steps <= self.steps:
            raise ValueError(f"steps must be in [1, {self.steps}]")
        return SpaceTimeField(steps * self.dt, self.slices[: steps + 1])

    def time_reversed(self) -> "SpaceTimeField":
        return SpaceTimeField(self.horizon, tuple(reversed(self.slices)))

    def map(self, fn: Callable[[GridFunction], GridFunction]) -> "SpaceTimeField":
        return SpaceTimeField(self.horizon, tuple(fn(s) for s in self.slices))


# ---------------------------------------------------------------------------
# spectral operators
# ---------------------------------------------------------------------------


def _scalar_only(f: GridFunction, op: str) -> None:
    if not f.is_scalar:
        raise ValueError(f"{op} expects a scalar-valued field, got {f.codomain!r}")


def _mollifier_kernel(grid: TensorGrid, width: float) -> np.ndarray:
    """Separable wrapped-Gaussian kernel of standard deviation ``width``.

    Sampled on the nodes and normalized to unit sum, so convolution is a
    convex combination: it preserves the mean exactly, keeps nonnegative
    fields nonnegative, and never increases the max.
    """
    axes = []
    for L, N, h in zip(grid.extent, grid.points, grid.spacing):
        x = np.arange(N) * h
        # wrap enough periodic images for a numerically exact periodization
        images = int(math.ceil(6.0 * width / L)) + 1
        k = np.zeros(N)
        for m in range(-images, images + 1):
            d = x + m * L
            # signed distance from 0 within this image
            k += np.exp(-0.5 * (d / width) ** 2)
        k /= k.sum()
        axes.append(k)
    kernel = axes[0]
    for a in axes[1:]:
        kernel = np.multiply.outer(kernel, a)
    return kernel


def resolvable_mollifier_index(grid: TensorGrid) -> int:
    """Largest n whose mollifier width 1/n the grid still resolves."""
    return max(1, int(math.floor(1.0 / (2.0 * max(grid.spacing)))))


def mollify(f: GridFunction, n: int) -> GridFunction:
    """Smooth ``f`` by circular convolution with a Gaussian of std 1/n.

    The width must be resolvable on the grid: ``1/n >= 2 * max_i h_i``.
    """
    if n < 1:
        raise ValueError("mollification index n must be >= 1")
    width = 1.0 / n
    hmax = max(f.grid.spacing)
    if width < 2.0 * hmax:
        needed = [
            int(2 ** math.ceil(math.log2(2.0 * L * n)))
            for L in f.grid.extent
        ]
        raise GridResolutionError(
            f"mollifier width 1/n = {width:g} is below 2*max(h) = {2*hmax:g}; "
            f"refine the grid to at least {needed} points per axis"
        )
    khat = np.fft.fftn(_mollifier_kernel(f.grid, width))
    samples = f.samples
    if f.is_scalar:
        out = np.real(np.fft.ifftn(np.fft.fftn(samples) * khat))
        return GridFunction(f.grid, "scalar", out)
    flat = samples.reshape(f.grid.points + (-1,))
    cols = [
        np.real(np.fft.ifftn(np.fft.fftn(flat[..., j]) * khat))
        for j in range(flat.shape[-1])
    ]
    out = np.stack(cols, axis=-1).reshape(samples.shape)
    return GridFunction(f.grid, f.codomain, out)


def _apply_multiplier(f: GridFunction, mult: np.ndarray) -> np.ndarray:
    return np.real(np.fft.ifftn(np.fft.fftn(f.samples) * mult))


def bessel_apply(f: GridFunction, alpha: float, lam: float = 1.0) -> GridFunction:
    """Fractional resolvent power: Fourier multiplier (lam + |xi|^2)^(alpha/2)."""
    _scalar_only(f, "bessel_apply")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if alpha == 0.0:
        return f
    xi = f.grid.frequency_mesh()
    xi2 = sum(x**2 for x in xi)
    mult = (lam + xi2) ** (alpha / 2.0)
    return GridFunction(f.grid, "scalar", _apply_multiplier(f, mult))


def _first_derivative_multipliers(grid: TensorGrid) -> list[np.ndarray]:
    """i*xi per axis, with the unpaired Nyquist mode zeroed to keep output real."""
    mults = []
    for axis in range(grid.dim):
        xi = grid.frequencies()[axis].copy()
        N = grid.points[axis]
        if N % 2 == 0:
            xi[N // 2] = 0.0
        shape = [1] * grid.dim
        shape[axis] = N
        mults.append(1j * xi.reshape(shape))
    return mults


def gradient(f: GridFunction) -> GridFunction:
    """Spectral gradient of a scalar field; vector-valued result."""
    _scalar_only(f, "gradient")
    fhat = np.fft.fftn(f.samples)
    comps = [
        np.real(np.fft.ifftn(fhat * m)) for m in _first_derivative_multipliers(f.grid)
    ]
    return GridFunction(f.grid, "vector", np.stack(comps, axis=-1))


def hessian(f: GridFunction) -> GridFunction:
    """Spectral Hessian of a scalar field; symmetric matrix-valued result."""
    _scalar_only(f, "hessian")
    grid = f.grid
    fhat = np.fft.fftn(f.samples)
    xi = grid.frequency_mesh()
    d = grid.dim
    out = np.zeros(grid.points + (d, d))
    for i in range(d):
        for j in range(i, d):
            comp = np.real(np.fft.ifftn(fhat * (-xi[i] * xi[j])))
            out[..., i, j] = comp
            out[..., j, i] = comp
    return GridFunction(grid, "matrix", out)


def laplacian(f: GridFunction) -> GridFunction:
    _scalar_only(f, "laplacian")
    xi = f.grid.frequency_mesh()
    mult = -sum(x**2 for x in xi)
    return GridFunction(f.grid, "scalar", _apply_multiplier(f, mult))


def random_band_limited(
    grid: TensorGrid,
    max_mode: int,
    rng: np.random.Generator,
    *,
    nonnegative: bool = False,
) -> GridFunction:
    """Random real field with Fourier support |k_i| <= max_mode.

    With ``nonnegative=True`` the field is shifted so its minimum is a small
    positive margin above zero.
    """
    shape = grid.points
    coeffs = np.zeros(shape, dtype=np.complex128)
    ranges = [
        [k % N for k in range(-max_mode, max_mode + 1)] for N in shape
    ]
    mesh = np.meshgrid(*[np.array(sorted(set(r))) for r in ranges], indexing="ij")
    idx = tuple(m.ravel() for m in mesh)
    vals = rng.standard_normal(idx[0].size) + 1j * rng.standard_normal(idx[0].size)
    coeffs[idx] = vals
    samples = np.real(np.fft.ifftn(coeffs)) * grid.node_count / (2 * max_mode + 1) ** grid.dim
    if nonnegative:
        samples = samples - samples.min() + 0.05 * (samples.max() - samples.min() + 1.0)
    return GridFunction(grid, "scalar", samples)


# ---------------------------------------------------------------------------
# binary dumps (.gfd)
# ---------------------------------------------------------------------------

_CODOMAIN_CODE = {"scalar": 0, "vector": 1, "matrix": 2}
_CODE_CODOMAIN = {v: k for k, v in _CODOMAIN_CODE.items()}


def write_gfd(path, obj: "GridFunction | SpaceTimeField") -> None:
    """Write a field to the .gfd binary layout.

    Header, all little-endian 64-bit: d, N_1..N_d (int), L_1..L_d (float),
    codomain code (0 scalar / 1 vector / 2 matrix), time steps M (0 for a
    plain GridFunction), horizon T (0.0 for a plain GridFunction).  The body
    is the row-major float64 sample block, time-major for space-time fields.
    """
    if isinstance(obj, SpaceTimeField):
        grid, codomain = obj.grid, obj.codomain
        steps, horizon = obj.steps, obj.horizon
        body = np.stack([s.samples for s in obj.slices], axis=0)
    else:
        grid, codomain = obj.grid, obj.codomain
        steps, horizon = 0, 0.0
        body = obj.samples
    with open(path, "wb") as fh:
        np.asarray([grid.dim], dtype="<i8").tofile(fh)
        np.asarray(grid.points, dtype="<i8").tofile(fh)
        np.asarray(grid.extent, dtype="<f8").tofile(fh)
        np.asarray([_CODOMAIN_CODE[codomain], steps], dtype="<i8").tofile(fh)
        np.asarray([horizon], dtype="<f8").tofile(fh)
        np.ascontiguousarray(body, dtype="<f8").tofile(fh)


def read_gfd(path) -> "GridFunction | SpaceTimeField":
    with open(path, "rb") as fh:
        d = int(np.fromfile(fh, dtype="<i8", count=1)[0])
        points = tuple(int(n) for n in np.fromfile(fh, dtype="<i8", count=d))
        extent = tuple(float(L) for L in np.fromfile(fh, dtype="<f8", count=d))
        code, steps = (int(v) for v in np.fromfile(fh, dtype="<i8", count=2))
        horizon = float(np.fromfile(fh, dtype="<f8", count=1)[0])
        grid = TensorGrid(extent, points)
        codomain = _CODE_CODOMAIN[code]
        per_slice = grid.node_count * int(np.prod(_codomain_shape(codomain, d), dtype=np.int64))
        n_slices = steps + 1 if steps > 0 else 1
        body = np.fromfile(fh, dtype="<f8", count=per_slice * n_slices)
    if body.size != per_slice * n_slices:
        raise ValueError(f"truncated .gfd file: {path}")
    shape = grid.points + _codomain_shape(codomain, d)
    if steps == 0:
        return GridFunction(grid, codomain, body.reshape(shape))
    slices = tuple(
        GridFunction(grid, codomain, body[k * per_slice : (k + 1) * per_slice].reshape(shape))
        for k in range(n_slices)
    )
    return SpaceTimeField(horizon, slices)
