"""Config-driven experiment commands.

Every command reads one TOML config, runs a scenario, and writes CSV tables
plus a manifest that echoes the fully resolved config (the manifest is the
only file carrying a timestamp, so reruns with identical seeds produce
byte-identical CSV bodies).  Commands raise ConfigError for bad inputs
(CLI exit code 2) and let numerical failures propagate (exit code 3).
"""

from __future__ import annotations

import ast
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .expressions import ExpressionError, compile_scalar, validate_expression
from .grid import (
    GridFunction,
    SpaceTimeField,
    TensorGrid,
    mollify,
    random_band_limited,
    resolvable_mollifier_index,
    write_gfd,
)
from .mms import space_refinement_study, time_refinement_study
from .norms import INF, MixedExponent, check_subcritical, mixed_space_norm
from .parabolic import (
    DiffusionCoefficient,
    dual_regularity_ratio,
    forward_regularity_ratios,
    small_time_decay,
    solve_dual,
    solve_forward,
)
from .sde import (
    coupling_experiment,
    euler_maruyama,
    girsanov_weight,
    khasminskii_functional,
    krylov_mc,
    sample_path,
    zvonkin_simulate,
)
from .zvonkin import build_map, export_map, shrink_horizon

__all__ = ["ConfigError", "ExperimentConfig", "run_command", "COMMANDS"]


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {value!r} to TOML")


def toml_dumps(data: dict, prefix: str = "") -> str:
    """Minimal TOML writer for the manifest subset (scalars, lists, tables)."""
    lines = []
    tables = []
    for key, value in data.items():
        if isinstance(value, dict):
            tables.append((key, value))
        else:
            lines.append(f"{key} = {_fmt(value)}")
    out = "\n".join(lines)
    for key, value in tables:
        name = f"{prefix}{key}"
        out += f"\n\n[{name}]\n" + toml_dumps(value, prefix=f"{name}.")
    return out


class ExperimentConfig:
    """Validated view over a raw TOML config dict."""

    def __init__(self, raw: dict):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a table")
        self.raw = raw
        self.scenario = raw.get("scenario", "unnamed")
        self._validate_expressions()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                return cls(tomllib.load(fh))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None

    def _validate_expressions(self):
        dim = len(self.raw.get("grid", {}).get("points", [1, 1, 1]))
        coeffs = self.raw.get("coefficients", {})
        try:
            for expr in coeffs.get("drift", []):
                validate_expression(expr, dim)
            sigma = coeffs.get("sigma", "1.0")
            for expr in sigma if isinstance(sigma, list) else [sigma]:
                validate_expression(expr, dim)
            if "source" in coeffs:
                validate_expression(coeffs["source"], dim)
        except ExpressionError as exc:
            raise ConfigError(str(exc)) from None

    # -- section accessors -------------------------------------------------

    def section(self, name: str) -> dict:
        value = self.raw.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"[{name}] must be a table")
        return value

    def require(self, section: str, key: str):
        table = self.section(section)
        if key not in table:
            raise ConfigError(f"missing key {key!r} in [{section}]")
        return table[key]

    def grid(self) -> TensorGrid:
        g = self.section("grid")
        try:
            return TensorGrid(tuple(g["extent"]), tuple(g["points"]))
        except KeyError as exc:
            raise ConfigError(f"missing grid key {exc}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def exponents(self) -> MixedExponent:
        e = self.section("exponents")
        if "p" not in e or "q" not in e:
            raise ConfigError("[exponents] needs keys p and q")
        try:
            return MixedExponent(tuple(e["p"]), e["q"])
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    def dim(self) -> int:
        return len(self.require("grid", "points"))

    # -- coefficients -------------------------------------------------------

    def drift(self):
        """None when absent (zero drift), else a vectorized callable."""
        exprs = self.section("coefficients").get("drift")
        if not exprs:
            return None
        dim = self.dim()
        if len(exprs) != dim:
            raise ConfigError(f"drift needs {dim} component expressions")
        comps = [compile_scalar(expr, dim) for expr in exprs]

        def fn(t, X):
            return np.stack([c(t, X) for c in comps], axis=-1)

        fn.expressions = tuple(exprs)
        return fn

    def sigma_spec(self):
        """Constant (scalar / diagonal) when possible, else a callable matrix."""
        sigma = self.section("coefficients").get("sigma", "1.0")
        dim = self.dim()
        exprs = sigma if isinstance(sigma, list) else [sigma]
        if isinstance(sigma, list) and len(exprs) != dim:
            raise ConfigError(f"diagonal sigma needs {dim} expressions")
        consts = []
        for expr in exprs:
            tree = validate_expression(expr, dim)
            names = {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)}
            if names - {"pi"}:
                consts = None
                break
            consts.append(float(compile_scalar(expr, dim)(0.0, np.zeros((1, dim)))[0]))
        if consts is not None:
            if not isinstance(sigma, list):
                return consts[0]
            return np.asarray(consts)
        comps = [compile_scalar(expr, dim) for expr in exprs]
        if not isinstance(sigma, list):
            return lambda t, X: comps[0](t, X)

        def fn(t, X):
            return np.stack([c(t, X) for c in comps], axis=-1)

        return fn

    def sigma_matrix_field(self, grid: TensorGrid) -> GridFunction:
        """Sigma sampled to a matrix-valued GridFunction (diagonal layouts)."""
        spec = self.sigma_spec()
        d = grid.dim
        out = np.zeros(grid.points + (d, d))
        if callable(spec):
            vals = spec(0.0, grid.nodes())
            if vals.shape == grid.points:
                for i in range(d):
                    out[..., i, i] = vals
            else:
                for i in range(d):
                    out[..., i, i] = vals[..., i]
        else:
            diag = np.broadcast_to(np.asarray(spec, dtype=np.float64), (d,))
            for i in range(d):
                out[..., i, i] = diag[i]
        return GridFunction(grid, "matrix", out)

    def source_field(self, grid: TensorGrid, horizon: float, steps: int) -> SpaceTimeField:
        expr = self.section("coefficients").get("source")
        if expr is None:
            raise ConfigError("missing [coefficients] source expression")
        fn = compile_scalar(expr, grid.dim)
        nodes = grid.nodes()
        times = np.linspace(0.0, horizon, steps + 1)
        slices = []
        for t in times:
            vals = fn(t, nodes)
            vals = np.where(np.isfinite(vals), vals, 0.0)
            slices.append(GridFunction(grid, "scalar", vals))
        return SpaceTimeField(horizon, tuple(slices))

    def drift_field(self, grid: TensorGrid, horizon: float, steps: int) -> SpaceTimeField | None:
        fn = self.drift()
        if fn is None:
            return None
        nodes = grid.nodes()
        times = np.linspace(0.0, horizon, steps + 1)
        slices = []
        for t in times:
            vals = fn(t, nodes)
            vals = np.where(np.isfinite(vals), vals, 0.0)
            slices.append(GridFunction(grid, "vector", vals))
        return SpaceTimeField(horizon, tuple(slices))

    def seeds(self, override: int | None) -> list[int]:
        sde = self.section("sde")
        if isinstance(sde.get("seeds"), list):
            return [int(s) for s in sde["seeds"]]
        base = int(override if override is not None else sde.get("seed0", 0))
        count = int(sde.get("seed_count", sde.get("seeds", 1)))
        return list(range(base, base + count))

    def base_seed(self, override: int | None) -> int:
        if override is not None:
            return int(override)
        return int(self.section("sde").get("seed0", self.raw.get("seed", 0)))


# ---------------------------------------------------------------------------
# shared builders
# ---------------------------------------------------------------------------


def band_limited_family(grid: TensorGrid, size: int, max_mode: int, seed: int) -> list[GridFunction]:
    rng = np.random.default_rng(seed)
    return [random_band_limited(grid, max_mode, rng) for _ in range(size)]


def perturbed_identity(grid: TensorGrid, amplitude: float, max_mode: int, seed: int) -> DiffusionCoefficient:
    """a = (1 + amplitude * s(x)) I with s smooth, |s| <= 1."""
    if not 0.0 <= amplitude < 1.0:
        raise ConfigError("perturbation amplitude must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    s = random_band_limited(grid, max_mode, rng)
    scale = s.max_abs()
    factor = 1.0 + amplitude * s.samples / (scale if scale > 0 else 1.0)
    d = grid.dim
    out = np.zeros(grid.points + (d, d))
    for i in range(d):
        out[..., i, i] = factor
    return DiffusionCoefficient(GridFunction(grid, "matrix", out))


def _margin_str(frac: Fraction) -> str:
    return str(frac)


def _write_csv(path: Path, header: str, rows: list[str]) -> None:
    path.write_text(header + "\n" + "\n".join(rows) + ("\n" if rows else ""))


def _write_manifest(out_dir: Path, command: str, cfg: ExperimentConfig, seed: int | None) -> None:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "created_unix": int(time.time()),
        "config": cfg.raw,
    }
    if seed is not None:
        manifest["seed"] = int(seed)
    (out_dir / f"{command}.manifest.toml").write_text(toml_dumps(manifest) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_check(cfg: ExperimentConfig, out_dir: Path, seed: int | None, threads: int) -> None:
    e = cfg.exponents()
    rows = []
    for threshold in (1, 2):
        rep = check_subcritical(e, threshold)
        rows.append(
            f"{threshold},{str(rep.ok).lower()},{_margin_str(rep.margin)},{_margin_str(e.harmonic_sum())}"
        )
        verdict = "pass" if rep.ok else "fail"
        print(f"{e.describe()} threshold {threshold}: {verdict}, margin {rep.margin}")
    _write_csv(out_dir / "check.csv", "threshold,pass,margin,harmonic_sum", rows)


def _pde_setup(cfg: ExperimentConfig):
    grid = cfg.grid()
    pde = cfg.section("pde")
    horizon = float(pde.get("horizon", 1.0))
    steps = int(pde.get("steps", 128))
    return grid, pde, horizon, steps


def cmd_solve(cfg: ExperimentConfig, out_dir: Path, seed: int | None, threads: int) -> None:
    grid, pde, horizon, steps = _pde_setup(cfg)
    manufactured = pde.get("manufactured")
    if manufactured:
        if manufactured in ("space", True):
            study = space_refinement_study()
        elif manufactured == "time":
            study = time_refinement_study()
        else:
            raise ConfigError("manufactured must be 'space' or 'time'")
        _write_csv(out_dir / "solve.csv", "parameter,value,error", study.csv_rows())
        return
    amp = float(pde.get("perturbation", 0.0))
    if amp > 0.0:
        a = perturbed_identity(grid, amp, int(pde.get("max_mode", 2)), int(pde.get("family_seed", 0)))
    else:
        sig = cfg.sigma_matrix_field(grid)
        a_samples = np.einsum("...ij,...kj->...ik", sig.samples, sig.samples)
        a = DiffusionCoefficient(GridFunction(grid, "matrix", a_samples))
    f = cfg.source_field(grid, horizon, steps)
    b = cfg.drift_field(grid, horizon, steps)
    report = solve_forward(a, f, b)
    if "exponents" in cfg.raw:
        forward_regularity_ratios(report, f, cfg.exponents())
    _write_csv(out_dir / "solve.csv", "key,value", report.csv_rows())
    if cfg.section("output").get("dump_fields"):
        write_gfd(out_dir / "solution.gfd", report.solution)


def cmd_dual(cfg: ExperimentConfig, out_dir: Path, seed: int | None, threads: int) -> None:
    grid, pde, horizon, steps = _pde_setup(cfg)
    sig = cfg.sigma_matrix_field(grid)
    a_samples = np.einsum("...ij,...kj->...ik", sig.samples, sig.samples)
    a = DiffusionCoefficient(GridFunction(grid, "matrix", a_samples))
    f = cfg.source_field(grid, horizon, steps)
    report = solve_dual(a, f)
    if "exponents" in cfg.raw:
        dual_regularity_ratio(report, f, cfg.exponents())
    _write_csv(out_dir / "dual.csv", "key,value", report.csv_rows())
    if cfg.section("output").get("dump_fields"):
        write_gfd(out_dir / "solution.gfd", report.solution)


def cmd_regularity(cfg: ExperimentConfig, out_dir: Path, seed: int | None, threads: int) -> None:
    grid, pde, horizon, steps = _pde_setup(cfg)
    e = cfg.exponents()
    size = int(pde.get("family_size", 20))
    max_mode = int(pde.get("max_mode", 4))
    fseed = int(pde.get("family_seed", 7)) if seed is None else seed
    amp = float(pde.get("perturbation", 0.3))
    refine = int(pde.get("refine", 2))

    rows = []
    worst = {}
    for factor in (1, refine):
        g = TensorGrid(grid.extent, tuple(N * factor for N in grid.points))
        a = perturbed_identity(g, amp, max_mode, fseed)
        family = band_limited_family(g, size, max_mode, fseed + 1)
        max_ratio = 0.0
        for member in family:
            F = SpaceTimeField.constant_in_time(member, horizon, steps * factor)
            report = solve_forward(a, F)
            ratios = dict(forward_regularity_ratios(report, F, e))
            max_ratio = max(max_ratio, ratios["hess_ratio"])
        worst[factor] = max_ratio
        rows.append(f"{'x'.join(str(N * factor) for N in grid.points)},{max_ratio!r}")
    drift = abs(worst[refine] - worst[1]) / worst[1]
    rows.append(f"drift,{drift!r}")
    _write_csv(out_dir / "regularity.csv", "grid,max_hess_ratio", rows)


def cmd_decay(cfg: ExperimentConfig, out_dir: Path, seed: int | None, threads: int) -> None:
    grid, pde, horizon, steps = _pde_setup(cfg)
    e = cfg.exponents()
    alphas = [float(a) for a in pde.get("alphas", [0.0])]
    horizons = [float(T) for T in pde.get("horizons", [1.0, 0.5, 0.25, 0.125])]
    size = int(pde.get("family_size", 5))
    max_mode = int(pde.get("max_mode", 4))
    fseed = int(pde.get("family_seed", 7)) if seed is None else seed
    amp = float(pde.get("perturbation", 0.0))
    if amp > 0:
        a = perturbed_identity(grid, amp, max_mode, fseed)
    else:
        a = DiffusionCoefficient.identity(grid)
    family = band_limited_family(grid, size, max_mode, fseed + 1)
    if "variants" in pde:
        variants = tuple(pde["variants"])
        if "sup" in variants and not check_subcritical(e, 2).ok:
            raise ConfigError("sup variant needs the threshold-2 condition")
        if "grad_sup" in variants and not check_subcritical(e, 1).ok:
            raise ConfigError("grad_sup variant needs the threshold-1 condition")
    else:
        # run whichever sup-norm rows the declared exponents admit
        variants = tuple(
            name
            for name, threshold in (("sup", 2), ("grad_sup", 1))
            if check_subcritical(e, threshold).ok
        )
    try:
        table = small_time_decay(
            a, family, e, alphas, horizons,
            steps_per_unit=int(pde.get("steps", 128)), variants=variants,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rows = []
    for key, vals in table["rows"].items():
        for T, v in zip(table["horizons"], vals):
            rows.append(f"{key},{T!r},{v!r}")
    rows.append(f"excluded,,{table['excluded']}")
    _write_csv(out_dir / "decay.csv", "variant,horizon,ratio", rows)


def _zvonkin_setup(cfg: ExperimentConfig):
    grid = cfg.grid()
    z = cfg.section("zvonkin")
    horizon = float(z.get("horizon", 1.0))
    steps = int(z.get("steps", 1024))
    eta = float(z.get("eta", 0.5))
    sigma_field = cfg.sigma_matrix_field(grid)
    b_field = cfg.drift_field(grid, horizon, steps)
    if b_field is None:
        b_field = SpaceTimeField.constant_in_time(
            GridFunction.zeros(grid, "vector"), horizon, steps
        )
    elif z.get("mollify", True):
        # singular drifts are smoothed at the resolvable width before the
        # solve; path experiments keep using the raw drift
        n = resolvable_mollifier_index(grid)
        b_field = b_field.map(lambda s: mollify(s, n))
    return grid, z, horizon, steps, eta, sigma_field, b_field


def cmd_zvonkin(cfg: ExperimentConfig, out_dir: Path, seed: int | None, threads: int) -> None:
    grid, z, horizon, steps, eta, sigma_field, b_field = _zvonkin_setup(cfg)
    if z.get("shrink", True):
        zmap = shrink_horizon(sigma_field, b_field, horizon, steps, eta=eta)
    else:
        zmap = build_map(sigma_field, b_field, horizon, steps, eta=eta)
    lo, hi = zmap.inverse_gradient_bounds()
    rng = np.random.default_rng(cfg.base_seed(seed))
    pts = rng.uniform(0.0, min(grid.extent), size=(int(z.get("roundtrip_points", 256)), grid.dim))
    t_mid = 0.5 * zmap.horizon
    back = zmap.phi_inv(t_mid, zmap.phi_at(t_mid, pts))
    roundtrip = float(np.max(np.linalg.norm(back - pts, axis=-1)))
    rows = [
        f"horizon,{zmap.horizon!r}",
        f"grad_sup,{zmap.grad_sup!r}",
        f"certificate,{str(zmap.certificate).lower()}",
        f"residual,{zmap.residual!r}",
        f"inv_grad_min,{lo!r}",
        f"inv_grad_max,{hi!r}",
        f"roundtrip_max_error,{roundtrip!r}",
    ]
    _write_csv(out_dir / "zvonkin.csv", "key,value", rows)
    if cfg.section("output").get("dump_fields"):
        export_map(zmap, sigma_field, out_dir / "zvonkin_map")


def cmd_simulate(cfg: ExperimentConfig, out_dir: Path, seed: int | None, threads: int) -> None:
    sde = cfg.section("sde")
    dim = cfg.dim()
    x0 = np.asarray(sde.get("x0", [0.0] * dim), dtype=np.float64)
    horizon = float(sde.get("horizon", 1.0))
    level = int(sde.get("level", 8))
    cap = float(sde.get("drift_cap", 1.0e3))
    rmax = float(sde.get("radius_max", 1.0e2))
    drift = cfg.drift()
    sigma = cfg.sigma_spec()
    method = sde.get("method", "euler")
    rows = []
    if method == "zvonkin":
        grid, z, zhorizon, steps, eta, sigma_field, b_field = _zvonkin_setup(cfg)
        if zhorizon < horizon - 1e-12:
            raise ConfigError("the map horizon must cover the simulation horizon")
        zmap = build_map(sigma_field, b_field, zhorizon, steps, eta=eta)
        if not zmap.certificate:
            raise ConfigError("zvonkin simulate requires a certified map; shrink the horizon")
    for s in cfg.seeds(seed):
        path = sample_path(s, horizon, level, dim)
        if method == "zvonkin":
            traj = zvonkin_simulate(zmap, sigma, x0, path, radius_max=rmax)
        else:
            traj = euler_maruyama(drift, sigma, x0, path, drift_cap=cap, radius_max=rmax)
        for t, state in zip(traj.times, traj.states):
            coords = ",".join(repr(float(v)) for v in state)
            rows.append(f"{s},{t!r},{coords}")
    head = "seed,time," + ",".join(f"x{i + 1}" for i in range(dim))
    _write_csv(out_dir / "simulate.csv", head, rows)


def cmd_couple(cfg: ExperimentConfig, out_dir: Path, seed: int | None, threads: int) -> None:
    sde = cfg.section("sde")
    dim = cfg.dim()
    x0 = np.asarray(sde.get("x0", [0.0] * dim), dtype=np.float64)
    horizon = float(sde.get("horizon", 1.0))
    lo, hi = (int(v) for v in sde.get("levels", [8, 12]))
    table = coupling_experiment(
        cfg.drift(),
        cfg.sigma_spec(),
        x0,
        cfg.seeds(seed),
        range(lo, hi + 1),
        horizon,
        dim,
        drift_cap=float(sde.get("drift_cap", 1.0e3)),
        radius_max=float(sde.get("radius_max", 1.0e2)),
    )
    _write_csv(out_dir / "couple.csv", "level,mean_error,included,excluded", table.csv_rows())


def cmd_krylov(cfg: ExperimentConfig, out_dir: Path, seed: int | None, threads: int) -> None:
    sde = cfg.section("sde")
    dim = cfg.dim()
    grid = cfg.grid()
    e = cfg.exponents()
    rep = check_subcritical(e, 2)
    if not rep.ok:
        raise ConfigError(
            f"declared exponents fail the occupation-scale condition (margin {rep.margin})"
        )
    expr = cfg.section("coefficients").get("source")
    if expr is None:
        raise ConfigError("krylov needs a [coefficients] source expression for f")
    f = compile_scalar(expr, dim)
    horizon = float(sde.get("horizon", 1.0))
    vals = f(0.0, grid.nodes())
    vals = np.where(np.isfinite(vals), np.abs(vals), 0.0)
    space = mixed_space_norm(GridFunction(grid, "scalar", vals), e.p)
    tq = 1.0 if e.q == INF else horizon ** (1.0 / float(e.q))
    source_norm = space * tq
    report = krylov_mc(
        f,
        cfg.drift(),
        cfg.sigma_spec(),
        np.asarray(sde.get("x0", [0.0] * dim), dtype=np.float64),
        horizon,
        int(sde.get("samples", 10000)),
        int(sde.get("level", 10)),
        seed=cfg.base_seed(seed),
        dim=dim,
        source_norm=source_norm,
        drift_cap=float(sde.get("drift_cap", 1.0e3)),
        radius_max=float(sde.get("radius_max", 1.0e2)),
        threads=threads,
    )
    rows = [
        f"mean,{report.estimate.mean!r}",
        f"stderr,{report.estimate.stderr!r}",
        f"n,{report.estimate.n}",
        f"source_norm,{report.source_norm!r}",
        f"ratio,{report.ratio!r}",
        f"excluded_nodes,{report.excluded_nodes}",
    ]
    _write_csv(out_dir / "krylov.csv", "key,value", rows)


def cmd_girsanov(cfg: ExperimentConfig, out_dir: Path, seed: int | None, threads: int) -> None:
    sde = cfg.section("sde")
    dim = cfg.dim()
    drift = cfg.drift()
    if drift is None:
        raise ConfigError("girsanov needs a drift")
    cap = float(sde.get("drift_cap", 1.0e3))
    est = girsanov_weight(
        drift,
        cfg.sigma_spec(),
        np.asarray(sde.get("x0", [0.0] * dim), dtype=np.float64),
        float(sde.get("horizon", 1.0)),
        int(sde.get("samples", 10000)),
        int(sde.get("level", 8)),
        seed=cfg.base_seed(seed),
        dim=dim,
        drift_cap=cap,
        threads=threads,
    )
    rows = [
        f"mean,{est.mean!r}",
        f"stderr,{est.stderr!r}",
        f"n,{est.n}",
        f"drift_cap,{cap!r}",
    ]
    _write_csv(out_dir / "girsanov.csv", "key,value", rows)


def cmd_khasminskii(cfg: ExperimentConfig, out_dir: Path, seed: int | None, threads: int) -> None:
    sde = cfg.section("sde")
    dim = cfg.dim()
    drift = cfg.drift()
    if drift is None:
        raise ConfigError("khasminskii needs a drift")
    caps = [float(c) for c in sde.get("drift_caps", [sde.get("drift_cap", 1.0e3)])]
    rows = []
    means = []
    for cap in caps:
        report = khasminskii_functional(
            drift,
            cfg.sigma_spec(),
            np.asarray(sde.get("x0", [0.0] * dim), dtype=np.float64),
            float(sde.get("horizon", 1.0)),
            float(sde.get("kappa", 1.0)),
            int(sde.get("samples", 10000)),
            int(sde.get("level", 8)),
            seed=cfg.base_seed(seed),
            dim=dim,
            drift_cap=cap,
            threads=threads,
        )
        rows.append(
            f"{cap!r},{report.estimate.mean!r},{report.estimate.stderr!r},"
            f"{str(report.overflowed).lower()}"
        )
        means.append(report.estimate.mean)
    if len(means) > 1 and all(math.isfinite(m) for m in means):
        drift_rel = abs(means[-1] - means[0]) / means[0]
        rows.append(f"cap_drift,{drift_rel!r},,")
    _write_csv(out_dir / "khasminskii.csv", "cap,mean,stderr,overflowed", rows)


def cmd_report(run_dir: Path, out_dir: Path) -> None:
    run_dir = Path(run_dir)
    manifests = sorted(run_dir.rglob("*.manifest.toml"))
    if not manifests:
        raise ConfigError(f"no manifests found under {run_dir}")
    summary = []
    long_rows = []
    for mpath in manifests:
        with open(mpath, "rb") as fh:
            manifest = tomllib.load(fh)
        seed = manifest.get("seed", "")
        stem = mpath.name.replace(".manifest.toml", "")
        run = str(mpath.parent.relative_to(run_dir))
        for csv_path in sorted(mpath.parent.glob(f"{stem}*.csv")):
            text = csv_path.read_text().strip().splitlines()
            if not text:
                continue
            header = text[0].split(",")
            for i, line in enumerate(text[1:]):
                summary.append(f"{run},{seed},{csv_path.name},{i},{line}")
                for col, value in zip(header, line.split(",")):
                    long_rows.append(f"{run},{seed},{csv_path.name},{i},{col},{value}")
    _write_csv(out_dir / "summary.csv", "run,seed,file,row,content", summary)
    _write_csv(out_dir / "long.csv", "run,seed,file,row,column,value", long_rows)


COMMANDS = {
    "check": cmd_check,
    "solve": cmd_solve,
    "dual": cmd_dual,
    "regularity": cmd_regularity,
    "decay": cmd_decay,
    "zvonkin": cmd_zvonkin,
    "simulate": cmd_simulate,
    "couple": cmd_couple,
    "krylov": cmd_krylov,
    "girsanov": cmd_girsanov,
    "khasminskii": cmd_khasminskii,
}


def run_command(command: str, config_path, out_dir, seed: int | None, threads: int) -> None:
    cfg = ExperimentConfig.load(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    COMMANDS[command](cfg, out, seed, threads)
    _write_manifest(out, command, cfg, seed)
