"""Arithmetic expressions in the timer variable ``tau``.

Grammar: numbers, ``tau``, constants ``pi`` and ``e``, binary ``+ - * / ^``
(``^`` is exponentiation, right-associative, binds tighter than unary minus
on its left operand as in ``-tau^2 == -(tau^2)``), unary ``+ -``, parentheses,
and the functions ``exp(.)`` and ``ln(.)``.  Parsing goes through Python's
``ast`` after mapping ``^`` to ``**``; anything outside the grammar is
rejected with the column of the offending token.
"""

import ast
import math

import numpy as np

from .errors import ModelParseError

_CONSTANTS = {"pi": math.pi, "e": math.e}
_FUNCS = {"exp": np.exp, "ln": np.log}
_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


def _original_column(body, col):
    """Map a 0-based column in the rewritten text back to ``body``."""
    shift = 0
    j = 0
    for i, ch in enumerate(body):
        if j >= col:
            return i
        j += 2 if ch == "^" else 1
        shift += 1
    return len(body)


class Expr:
    """A compiled expression; call with a scalar or array of tau values."""

    def __init__(self, body, where=""):
        if not isinstance(body, str) or not body.strip():
            raise ModelParseError(f"{where}: empty expression", None, None)
        self.body = body
        self.where = where
        if "**" in body:
            raise ModelParseError(f"{where}: use '^' for powers in '{body}'", 1, body.index("**") + 1)
        text = body.replace("^", "**")
        try:
            tree = ast.parse(text.strip(), mode="eval")
        except SyntaxError as exc:
            col = _original_column(body, (exc.offset or 1) - 1) + 1
            raise ModelParseError(f"{where}: cannot parse expression '{body}'", exc.lineno, col) from None
        lead = len(text) - len(text.lstrip())
        self._check(tree.body, lead)
        self._tree = tree.body

    def _fail(self, node, lead, what):
        col = _original_column(self.body, node.col_offset + lead) + 1
        raise ModelParseError(f"{self.where}: {what} in '{self.body}'", 1, col)

    def _check(self, node, lead):
        if isinstance(node, ast.BinOp):
            if type(node.op) not in _BINOPS:
                self._fail(node, lead, "unsupported operator")
            self._check(node.left, lead)
            self._check(node.right, lead)
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, (ast.UAdd, ast.USub)):
                self._fail(node, lead, "unsupported unary operator")
            self._check(node.operand, lead)
        elif isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                self._fail(node, lead, "only numeric literals are allowed")
        elif isinstance(node, ast.Name):
            if node.id != "tau" and node.id not in _CONSTANTS:
                self._fail(node, lead, f"unknown name '{node.id}'")
        elif isinstance(node, ast.Call):
            fn = node.func
            if not isinstance(fn, ast.Name) or fn.id not in _FUNCS:
                self._fail(node, lead, "only exp() and ln() may be called")
            if len(node.args) != 1 or node.keywords:
                self._fail(node, lead, f"{fn.id}() takes exactly one argument")
            self._check(node.args[0], lead)
        else:
            self._fail(node, lead, f"'{type(node).__name__}' is not part of the grammar")

    def _eval(self, node, tau):
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, tau), self._eval(node.right, tau))
        if isinstance(node, ast.UnaryOp):
            v = self._eval(node.operand, tau)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return tau if node.id == "tau" else _CONSTANTS[node.id]
        return _FUNCS[node.func.id](self._eval(node.args[0], tau))

    def __call__(self, tau):
        tau = np.asarray(tau, dtype=float)
        with np.errstate(all="ignore"):
            out = self._eval(self._tree, tau)
        return np.broadcast_to(np.asarray(out, dtype=float), tau.shape).copy()[()]

    @property
    def uses_tau(self):
        return any(isinstance(n, ast.Name) and n.id == "tau" for n in ast.walk(self._tree))

    def __repr__(self):
        return f"Expr({self.body!r})"
