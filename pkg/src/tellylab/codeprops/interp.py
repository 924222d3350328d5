"""Tree-walking evaluator for MiniPy functions.

Used to confirm that program rewrites preserve behaviour on sample inputs.
"""

from __future__ import annotations

import operator

from .syntax import AstNode, functions


class EvalError(RuntimeError):
    pass


class StepLimit(EvalError):
    pass


class _Return(Exception):
    def __init__(self, value):
        self.value = value


_BIN = {"Add": operator.add, "Sub": operator.sub, "Mult": operator.mul, "Div": operator.truediv,
        "FloorDiv": operator.floordiv, "Mod": operator.mod, "Eq": operator.eq, "NotEq": operator.ne,
        "Lt": operator.lt, "LtE": operator.le, "Gt": operator.gt, "GtE": operator.ge}
_AUG = {"AugAdd": "Add", "AugSub": "Sub", "AugMult": "Mult", "AugFloorDiv": "FloorDiv", "AugMod": "Mod"}
_BUILTINS = {"range": range, "abs": abs, "min": min, "max": max, "len": len, "str": str}
_CONST = {"True": True, "False": False, "None": None}


class Interpreter:
    def __init__(self, module: AstNode, max_steps: int = 100_000):
        self.funcs = {f.children[0].value: f for f in functions(module)}
        self.max_steps = max_steps
        self.steps = 0

    def call(self, name: str, *args):
        self.steps = 0
        return self._invoke(name, list(args))

    def _invoke(self, name: str, args: list):
        if name in _BUILTINS:
            try:
                return _BUILTINS[name](*args)
            except (TypeError, ValueError) as exc:
                raise EvalError(str(exc)) from exc
        f = self.funcs.get(name)
        if f is None:
            raise EvalError(f"unknown function {name!r}")
        params = [p.value for p in f.children[1].children]
        if len(params) != len(args):
            raise EvalError(f"{name} takes {len(params)} arguments")
        env = dict(zip(params, args))
        try:
            self._block(f.children[2].children, env)
        except _Return as r:
            return r.value
        return None

    def _tick(self):
        self.steps += 1
        if self.steps > self.max_steps:
            raise StepLimit("step limit exceeded")

    def _block(self, stmts, env):
        for s in stmts:
            self._stmt(s, env)

    def _stmt(self, s: AstNode, env):
        self._tick()
        k, c = s.kind, s.children
        if k == "Assign":
            env[c[0].value] = self._expr(c[1], env)
        elif k in _AUG:
            env[c[0].value] = self._binop(_AUG[k], self._lookup(c[0].value, env), self._expr(c[1], env))
        elif k == "Return":
            raise _Return(self._expr(c[0], env) if c else None)
        elif k == "If":
            if self._expr(c[0], env):
                return self._block(c[1].children, env)
            for part in c[2:]:
                if part.kind == "Elif":
                    if self._expr(part.children[0], env):
                        return self._block(part.children[1].children, env)
                else:
                    return self._block(part.children[0].children, env)
        elif k == "While":
            while self._expr(c[0], env):
                self._tick()
                self._block(c[1].children, env)
        elif k == "For":
            for v in self._expr(c[1], env):
                self._tick()
                env[c[0].value] = v
                self._block(c[2].children, env)
        elif k == "ExprStmt":
            self._expr(c[0], env)
        elif k == "Pass":
            pass
        else:
            raise EvalError(f"cannot execute {k}")

    def _lookup(self, name, env):
        if name not in env:
            raise EvalError(f"name {name!r} is not defined")
        return env[name]

    def _binop(self, kind, a, b):
        try:
            return _BIN[kind](a, b)
        except (TypeError, ZeroDivisionError, OverflowError) as exc:
            raise EvalError(str(exc)) from exc

    def _expr(self, e: AstNode, env):
        k, c = e.kind, e.children
        if k == "Identifier":
            return self._lookup(e.value, env)
        if k == "Number":
            return float(e.value) if "." in e.value else int(e.value)
        if k == "String":
            return e.value[1:-1]
        if k == "Constant":
            return _CONST[e.value]
        if k == "Paren":
            return self._expr(c[0], env)
        if k == "Neg":
            v = self._expr(c[0], env)
            if isinstance(v, str):
                raise EvalError("bad operand for unary -")
            return -v
        if k == "Not":
            return not self._expr(c[0], env)
        if k == "And":
            return self._expr(c[0], env) and self._expr(c[1], env)
        if k == "Or":
            return self._expr(c[0], env) or self._expr(c[1], env)
        if k == "Call":
            return self._invoke(c[0].value, [self._expr(a, env) for a in c[1].children])
        if k in _BIN:
            return self._binop(k, self._expr(c[0], env), self._expr(c[1], env))
        raise EvalError(f"cannot evaluate {k}")


def run(module: AstNode, name: str, *args, max_steps: int = 100_000):
    """Result of calling ``name`` or the exception type name if evaluation fails."""
    try:
        return Interpreter(module, max_steps).call(name, *args)
    except EvalError as exc:
        return f"<{type(exc).__name__}>"
    except RecursionError:
        return "<RecursionError>"
