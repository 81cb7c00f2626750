"""Whitelisted coefficient expressions for experiment configs.

Closed-form coefficients are given as strings over a deliberately small
grammar: numeric constants, the coordinates ``x1..x3`` and time ``t``, the
constant ``pi``, the arithmetic operators ``+ - * / **``, and the calls
``sin, cos, exp, sqrt, abs`` plus ``ball(v, r)`` (the indicator of
``|v| <= r``).  Anything else is rejected at parse time, which keeps
configs reproducible and safe to evaluate.
"""

from __future__ import annotations

import ast
from typing import Callable

import numpy as np

__all__ = ["ExpressionError", "compile_scalar", "validate_expression"]

_FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "ball": lambda v, r: (np.abs(v) <= r) * 1.0,
}
_CONSTANTS = {"pi": np.pi}
_VARIABLES = ("t", "x1", "x2", "x3")

_ALLOWED_NODES = (
    ast.Expression,
    ast.BinOp,
    ast.UnaryOp,
    ast.Add,
    ast.Sub,
    ast.Mult,
    ast.Div,
    ast.Pow,
    ast.USub,
    ast.UAdd,
    ast.Constant,
    ast.Name,
    ast.Call,
    ast.Load,
)


class ExpressionError(ValueError):
    """An expression stepped outside the whitelist."""


def validate_expression(expr: str, dim: int) -> ast.Expression:
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {expr!r}: {exc.msg}") from None
    allowed_names = set(_CONSTANTS) | {"t"} | {f"x{i}" for i in range(1, dim + 1)}
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ExpressionError(
                f"unknown token {type(node).__name__!r} in expression {expr!r}"
            )
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS:
                raise ExpressionError(f"unknown function in expression {expr!r}")
            if node.keywords:
                raise ExpressionError(f"keyword arguments not allowed in {expr!r}")
        elif isinstance(node, ast.Name):
            parent_ok = node.id in allowed_names or node.id in _FUNCTIONS
            if not parent_ok:
                raise ExpressionError(f"unknown name {node.id!r} in expression {expr!r}")
        elif isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)):
                raise ExpressionError(f"non-numeric constant in expression {expr!r}")
    return tree


def compile_scalar(expr: str, dim: int) -> Callable:
    """Compile to a vectorized callable ``fn(t, X)`` with X of shape (..., d)."""
    tree = validate_expression(expr, dim)
    code = compile(tree, "<coefficient>", "eval")

    def fn(t, X):
        X = np.asarray(X, dtype=np.float64)
        env = dict(_FUNCTIONS)
        env.update(_CONSTANTS)
        env["t"] = t
        for i in range(dim):
            env[f"x{i + 1}"] = X[..., i]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = eval(code, {"__builtins__": {}}, env)
        return np.broadcast_to(np.asarray(out, dtype=np.float64), X.shape[:-1]).copy()

    fn.expression = expr
    return fn
