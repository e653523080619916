"""Small arithmetic expression language over complex coordinates.

Formulas are parsed with :mod:`ast` and only a whitelisted subset is
accepted, so configuration files never execute arbitrary code.

Recognised names (``n`` is the complex dimension):

* ``z`` (n = 1) or ``z1, z2`` (n = 2), complex coordinates;
  ``x, y`` / ``x1, y1, x2, y2`` their real and imaginary parts;
* ``r``, the Euclidean norm of the point; in n = 2 ``|z|`` means the same;
* ``pi``, ``e``;
* functions ``abs re im Re Im conj log exp sqrt sin cos tanh max min``.

``^`` is accepted as a power operator and ``|expr|`` as absolute value.
"""
from __future__ import annotations

import ast

import numpy as np


class ExpressionError(ValueError):
    pass


class _Vec:
    """The point z in C^2; only its norm is meaningful in a scalar formula."""

    def __init__(self, norm):
        self.norm = norm

    def __abs__(self):
        return self.norm


_FUNCS = {
    "abs": abs,
    "re": np.real,
    "Re": np.real,
    "im": np.imag,
    "Im": np.imag,
    "conj": np.conj,
    "log": lambda a: np.log(a) if np.isrealobj(a) else np.log(a + 0j),
    "exp": np.exp,
    "sqrt": lambda a: np.sqrt(a) if np.isrealobj(a) else np.sqrt(a + 0j),
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "max": np.maximum,
    "min": np.minimum,
}

_BINOPS = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
    ast.Pow: lambda a, b: a ** b,
}


def _bars_to_abs(text: str) -> str:
    """Rewrite ``|a|`` as ``abs(a)``; ``log|a|`` becomes ``log(abs(a))``."""
    out = []
    closers = []
    expect_operand = True
    word = ""
    for ch in text:
        if ch == "|":
            if word in _FUNCS:
                out.append("(abs(")
                closers.append("))")
            elif expect_operand:
                out.append("abs(")
                closers.append(")")
            elif closers:
                out.append(closers.pop())
                expect_operand = False
                word = ""
                continue
            else:
                raise ExpressionError("unbalanced '|'")
            expect_operand = True
            word = ""
            continue
        out.append(ch)
        if ch.isspace():
            continue
        word = word + ch if (ch.isalnum() or ch == "_") else ""
        expect_operand = ch in "(+-*/^,"
    if closers:
        raise ExpressionError("unbalanced '|'")
    return "".join(out)


def _check(node: ast.AST, names: set[str]) -> None:
    for sub in ast.walk(node):
        if isinstance(sub, (ast.Expression, ast.Load, ast.operator, ast.unaryop)):
            if isinstance(sub, ast.operator) and type(sub) not in _BINOPS:
                raise ExpressionError(f"operator {type(sub).__name__} not allowed")
            continue
        if isinstance(sub, (ast.BinOp, ast.UnaryOp)):
            if isinstance(sub, ast.UnaryOp) and not isinstance(sub.op, (ast.USub, ast.UAdd)):
                raise ExpressionError("only unary + and - are allowed")
            continue
        if isinstance(sub, ast.Constant):
            if not isinstance(sub.value, (int, float, complex)) or isinstance(sub.value, bool):
                raise ExpressionError(f"constant {sub.value!r} not allowed")
            continue
        if isinstance(sub, ast.Name):
            if sub.id not in names and sub.id not in _FUNCS:
                raise ExpressionError(f"unknown name '{sub.id}'")
            continue
        if isinstance(sub, ast.Call):
            if not isinstance(sub.func, ast.Name) or sub.func.id not in _FUNCS:
                raise ExpressionError("only whitelisted functions may be called")
            if sub.keywords:
                raise ExpressionError("keyword arguments not allowed")
            continue
        raise ExpressionError(f"syntax element {type(sub).__name__} not allowed")


def _variables(n: int) -> list[str]:
    base = ["r", "pi", "e"]
    if n == 1:
        return base + ["z", "x", "y"]
    return base + ["z", "z1", "z2", "x1", "y1", "x2", "y2"]


class Expression:
    """A compiled formula ``f(points)`` with ``points`` of shape (N, 2n)."""

    def __init__(self, text: str, n: int):
        if n not in (1, 2):
            raise ExpressionError("complex dimension must be 1 or 2")
        self.text = str(text)
        self.n = n
        src = _bars_to_abs(self.text).replace("^", "**")
        try:
            tree = ast.parse(src.strip(), mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse '{self.text}': {exc.msg}") from None
        _check(tree, set(_variables(n)))
        self._tree = tree
        self._code = compile(tree, "<formula>", "eval")

    def _env(self, pts: np.ndarray) -> dict:
        env = dict(_FUNCS)
        env["pi"] = np.pi
        env["e"] = np.e
        env["r"] = np.sqrt(np.sum(pts * pts, axis=1))
        if self.n == 1:
            env["x"], env["y"] = pts[:, 0], pts[:, 1]
            env["z"] = pts[:, 0] + 1j * pts[:, 1]
        else:
            env["x1"], env["y1"], env["x2"], env["y2"] = pts.T
            env["z1"] = pts[:, 0] + 1j * pts[:, 1]
            env["z2"] = pts[:, 2] + 1j * pts[:, 3]
            env["z"] = _Vec(env["r"])
        return env

    def __call__(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if pts.shape[1] != 2 * self.n:
            raise ExpressionError(f"expected points with {2 * self.n} coordinates")
        with np.errstate(all="ignore"):
            try:
                val = eval(self._code, {"__builtins__": {}}, self._env(pts))
            except (TypeError, ValueError, ZeroDivisionError) as exc:
                raise ExpressionError(f"cannot evaluate '{self.text}': {exc}") from None
        if isinstance(val, _Vec):
            raise ExpressionError("the vector z must appear inside |.|")
        val = np.broadcast_to(np.asarray(val), (pts.shape[0],))
        if np.iscomplexobj(val):
            scale = 1.0 + np.nanmax(np.abs(val), initial=0.0)
            if np.nanmax(np.abs(val.imag), initial=0.0) > 1e-9 * scale:
                raise ExpressionError(f"formula '{self.text}' is not real-valued")
            val = val.real
        return np.array(val, dtype=float)

    def __repr__(self):
        return f"Expression({self.text!r}, n={self.n})"


def as_expression(value, n: int) -> Expression:
    """Coerce a number or a formula string to an :class:`Expression`."""
    if isinstance(value, Expression):
        return value
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return Expression(repr(float(value)), n)
    if isinstance(value, str):
        return Expression(value, n)
    raise ExpressionError(f"cannot interpret {value!r} as a formula")
