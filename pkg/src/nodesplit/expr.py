"""Closed expression grammar for deterministic nodes and distribution arguments.

Expressions are immutable trees of tuples:

    ("const", value)
    ("ref", name)
    (op, arg, ...)   with op in OPS

They are parsed from a restricted Python-like syntax with :mod:`ast` and
printed back in a canonical form, so ``parse(to_string(e)) == e``.
"""
from __future__ import annotations

import ast
import math
from typing import Mapping, Union

Expr = tuple

# op name -> arity
OPS = {
    "add": 2,
    "sub": 2,
    "mul": 2,
    "div": 2,
    "neg": 1,
    "log": 1,
    "exp": 1,
    "logit": 1,
    "ilogit": 1,
    "indicator": 3,
}

_BINOPS = {ast.Add: "add", ast.Sub: "sub", ast.Mult: "mul", ast.Div: "div"}
_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/"}
_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2}
_FUNC_ALIASES = {"inv_logit": "ilogit", "expit": "ilogit"}


class ExpressionError(ValueError):
    pass


def const(value: float) -> Expr:
    return ("const", float(value))


def ref(name: str) -> Expr:
    return ("ref", name)


def parse(source: Union[str, float, int]) -> Expr:
    """Parse an expression string such as ``"N * rho * (1 - kappa)"``."""
    if isinstance(source, (int, float)):
        return const(source)
    try:
        tree = ast.parse(str(source).strip(), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse expression {source!r}: {exc.msg}") from None
    return _convert(tree.body, source)


def _convert(node, source) -> Expr:
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
            and not isinstance(node.value, bool):
        return const(node.value)
    if isinstance(node, ast.Name):
        return ref(node.id)
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
        inner = _convert(node.operand, source)
        if inner[0] == "const":
            return const(-inner[1])
        return ("neg", inner)
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.UAdd):
        return _convert(node.operand, source)
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return (_BINOPS[type(node.op)], _convert(node.left, source),
                _convert(node.right, source))
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and not node.keywords:
        name = _FUNC_ALIASES.get(node.func.id, node.func.id)
        if name not in OPS or name in _SYMBOL or name == "neg":
            raise ExpressionError(f"unknown function {node.func.id!r} in {source!r}")
        if len(node.args) != OPS[name]:
            raise ExpressionError(
                f"{name} takes {OPS[name]} argument(s), got {len(node.args)} in {source!r}")
        return (name,) + tuple(_convert(a, source) for a in node.args)
    raise ExpressionError(f"unsupported syntax in expression {source!r}")


def format_number(x: float) -> str:
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def to_string(e: Expr) -> str:
    """Canonical text form of an expression."""
    return _fmt(e, 0)


def _fmt(e: Expr, parent_prec: int, right: bool = False) -> str:
    op = e[0]
    if op == "const":
        s = format_number(e[1])
        return f"({s})" if e[1] < 0 and parent_prec > 0 else s
    if op == "ref":
        return e[1]
    if op == "neg":
        return f"-{_fmt(e[1], 3)}" if parent_prec < 3 else f"(-{_fmt(e[1], 3)})"
    if op in _SYMBOL:
        prec = _PREC[op]
        s = f"{_fmt(e[1], prec)} {_SYMBOL[op]} {_fmt(e[2], prec, right=True)}"
        if prec < parent_prec or (right and prec == parent_prec):
            return f"({s})"
        return s
    return f"{op}({', '.join(_fmt(a, 0) for a in e[1:])})"


def refs(e: Expr) -> set:
    """Names referenced by an expression."""
    if e[0] == "const":
        return set()
    if e[0] == "ref":
        return {e[1]}
    out = set()
    for a in e[1:]:
        out |= refs(a)
    return out


def rename(e: Expr, mapping: Mapping[str, str]) -> Expr:
    if e[0] == "const":
        return e
    if e[0] == "ref":
        return ("ref", mapping.get(e[1], e[1]))
    return (e[0],) + tuple(rename(a, mapping) for a in e[1:])


def _logit(p):
    if p <= 0.0:
        return -math.inf
    if p >= 1.0:
        return math.inf
    return math.log(p / (1.0 - p))


def _ilogit(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def _safe_log(x):
    if x > 0:
        return math.log(x)
    return -math.inf if x == 0 else math.nan


def evaluate(e: Expr, env: Mapping[str, float]) -> float:
    """Evaluate an expression with plain floats (reference path, no numba)."""
    op = e[0]
    if op == "const":
        return e[1]
    if op == "ref":
        return float(env[e[1]])
    args = [evaluate(a, env) for a in e[1:]]
    if op == "add":
        return args[0] + args[1]
    if op == "sub":
        return args[0] - args[1]
    if op == "mul":
        return args[0] * args[1]
    if op == "div":
        return args[0] / args[1] if args[1] != 0 else math.copysign(math.inf, args[0])
    if op == "neg":
        return -args[0]
    if op == "log":
        return _safe_log(args[0])
    if op == "exp":
        return math.exp(args[0]) if args[0] < 709.0 else math.inf
    if op == "logit":
        return _logit(args[0])
    if op == "ilogit":
        return _ilogit(args[0])
    if op == "indicator":
        lo, x, hi = args
        return 1.0 if lo <= x <= hi else 0.0
    raise ExpressionError(f"unknown op {op!r}")
