"""snl: a numerical laboratory for SDEs with singular drifts.

Building blocks: periodic tensor grids with spectral operators, mixed-norm
space/time norms with per-axis exponents, a Crank-Nicolson/fixed-point
parabolic solver with its dual, the drift-removing change of variables, and
seeded Monte-Carlo probes (coupling, occupation estimates, exponential
weights) for path simulation with capped singular drifts.
"""

__version__ = "0.1.0"

from .grid import (
    GridFunction,
    SpaceTimeField,
    TensorGrid,
    bessel_apply,
    gradient,
    hessian,
    laplacian,
    mollify,
    random_band_limited,
    read_gfd,
    write_gfd,
)
from .norms import (
    INF,
    MixedExponent,
    NormReport,
    bessel_norm,
    check_pointwise_bound,
    check_subcritical,
    maximal_operator,
    mixed_space_norm,
    mixed_spacetime_norm,
)
from .parabolic import (
    DiffusionCoefficient,
    SolveReport,
    dual_regularity_ratio,
    forward_regularity_ratios,
    heat_kernel,
    small_time_decay,
    solve_dual,
    solve_forward,
)
from .sde import (
    BrownianPath,
    MCEstimate,
    Trajectory,
    coupling_experiment,
    euler_maruyama,
    girsanov_weight,
    khasminskii_functional,
    krylov_mc,
    refine,
    sample_path,
    zvonkin_simulate,
)
from .zvonkin import ZvonkinMap, build_map, shrink_horizon, transformed_diffusion

__all__ = [
    "__version__",
    "TensorGrid",
    "GridFunction",
    "SpaceTimeField",
    "mollify",
    "bessel_apply",
    "gradient",
    "hessian",
    "laplacian",
    "random_band_limited",
    "write_gfd",
    "read_gfd",
    "INF",
    "MixedExponent",
    "NormReport",
    "mixed_space_norm",
    "mixed_spacetime_norm",
    "bessel_norm",
    "check_subcritical",
    "maximal_operator",
    "check_pointwise_bound",
    "DiffusionCoefficient",
    "SolveReport",
    "solve_forward",
    "solve_dual",
    "heat_kernel",
    "forward_regularity_ratios",
    "dual_regularity_ratio",
    "small_time_decay",
    "ZvonkinMap",
    "build_map",
    "shrink_horizon",
    "transformed_diffusion",
    "BrownianPath",
    "Trajectory",
    "MCEstimate",
    "sample_path",
    "refine",
    "euler_maruyama",
    "coupling_experiment",
    "krylov_mc",
    "girsanov_weight",
    "khasminskii_functional",
    "zvonkin_simulate",
]
