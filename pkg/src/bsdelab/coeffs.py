"""Safe arithmetic expression compiler for coefficient specifications.

Fixture coefficients are stored as small expression strings ("0.2*x",
"1 - tanh(x)**2") instead of opaque callables, so fixture definitions stay
printable and reproducible.  The compiler admits plain arithmetic, a short
whitelist of elementary functions, and nothing else; in particular no
attribute access, no subscripts, no comprehensions.
"""

from __future__ import annotations

import ast
import math

import numpy as np

from .errors import ConfigError

_FUNCTIONS = {
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "sinh": np.sinh,
    "cosh": np.cosh,
    "tanh": np.tanh,
    "abs": np.abs,
}

_CONSTANTS = {"pi": math.pi, "e": math.e}

_ALLOWED_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)
_ALLOWED_UNARY = (ast.UAdd, ast.USub)


def _check_node(node: ast.AST, variables: tuple[str, ...], source: str) -> None:
    if isinstance(node, ast.Expression):
        _check_node(node.body, variables, source)
    elif isinstance(node, ast.BinOp) and isinstance(node.op, _ALLOWED_BINOPS):
        _check_node(node.left, variables, source)
        _check_node(node.right, variables, source)
    elif isinstance(node, ast.UnaryOp) and isinstance(node.op, _ALLOWED_UNARY):
        _check_node(node.operand, variables, source)
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS:
            raise ConfigError(f"unknown function in expression {source!r}")
        if node.keywords or len(node.args) != 1:
            raise ConfigError(f"functions take one positional argument: {source!r}")
        _check_node(node.args[0], variables, source)
    elif isinstance(node, ast.Name):
        if node.id not in variables and node.id not in _CONSTANTS:
            raise ConfigError(f"unknown name {node.id!r} in expression {source!r}")
    elif isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)):
            raise ConfigError(f"non-numeric constant in expression {source!r}")
    else:
        raise ConfigError(f"disallowed syntax in expression {source!r}")


def compile_expr(source: str, variables: tuple[str, ...]):
    """Compile an expression string to a vectorized callable of `variables`.

    The returned callable accepts the named variables as keyword or
    positional arguments (numpy arrays or scalars) and broadcasts through
    numpy.  The source string is kept on the `.source` attribute.
    """
    try:
        tree = ast.parse(source, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse expression {source!r}: {exc}") from None
    _check_node(tree, variables, source)
    code = compile(tree, f"<expr {source!r}>", "eval")
    namespace = {"__builtins__": {}}
    namespace.update(_FUNCTIONS)
    namespace.update(_CONSTANTS)

    def fn(*args, **kwargs):
        local = dict(zip(variables, args))
        local.update(kwargs)
        return eval(code, namespace, local)

    fn.source = source
    fn.variables = variables
    return fn
