"""Deterministic generator of small structured MiniPy functions with templated descriptions.

Each program is built as an AST, so the generator knows the ground truth for
every emitted token class and for the number of decision points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..codeprops.lexer import CLASSES
from ..codeprops.syntax import AstNode, add_parens, emit_lines, leaf, node, render
from ..numcore import RngStream
from .records import CorpusRecord

VERBS = ("compute", "count", "find", "sum", "scan", "build", "check", "track", "measure", "reduce",
         "score", "walk")
NOUNS = ("values", "items", "steps", "digits", "points", "pairs", "limit", "span", "total", "signal",
         "grid", "block")
PARAMS = ("n", "m", "k", "x", "y", "limit", "size", "start", "stop", "base")
LOCALS = ("acc", "total", "result", "value", "best", "count", "tmp", "score", "level", "cur")
LOOP_VARS = ("i", "j", "idx", "t")
COUNTERS = ("c", "w", "pos", "step")
LABELS = ('"low"', '"high"', '"even"', '"odd"', '"zero"', '"big"', '"small"', '"ok"')
LABEL_VAR = "label"

# relative frequency of 0..7 decision points per function; more do not fit in the
# token budget with one statement per line
DECISION_WEIGHTS = (2.0, 3.0, 3.0, 3.0, 2.5, 2.2, 2.0, 2.0)


@dataclass
class Program:
    tree: AstNode  # FunctionDef
    name: str
    params: list[str]
    decisions: int
    tags: dict = field(default_factory=dict)

    @property
    def code(self) -> str:
        return render(emit_lines(self.tree))

    def token_classes(self) -> list[str]:
        return [c for _, toks in emit_lines(self.tree) for _, c in toks]

    def model_length(self) -> int:
        """Tokens after word-level encoding: code tokens + one INDENT per level + NEWLINE per line."""
        lines = emit_lines(self.tree)
        return sum(len(t) + level + 1 for level, t in lines)


def ident(name: str) -> AstNode:
    return leaf("Identifier", name)


def num(v: int) -> AstNode:
    return node("Neg", leaf("Number", str(-v))) if v < 0 else leaf("Number", str(v))


class ProgramGenerator:
    def __init__(self, rng: np.random.Generator, max_depth: int = 3):
        self.rng = rng
        self.max_depth = max_depth

    # small helpers over the generator's RNG
    def pick(self, seq):
        return seq[int(self.rng.integers(len(seq)))]

    def chance(self, p: float) -> bool:
        return bool(self.rng.random() < p)

    def function(self, decisions: int | None = None) -> Program:
        rng = self.rng
        if decisions is None:
            w = np.asarray(DECISION_WEIGHTS)
            decisions = int(rng.choice(len(w), p=w / w.sum()))
        verb, noun = self.pick(VERBS), self.pick(NOUNS)
        name = f"{verb}_{noun}"
        nparams = int(rng.integers(1, 4))
        params = [str(p) for p in rng.choice(PARAMS, size=nparams, replace=False)]
        self.labelled = self.chance(0.3)
        self.used_locals: list[str] = []
        self.counters = list(COUNTERS)
        self.loop_vars = list(LOOP_VARS)
        self.params = params
        # many decision points only fit the token budget with terse bodies
        self.compact = decisions >= 5
        self.protected: set[str] = set()
        self.tags = {"for": 0, "while": 0, "if": 0, "elif": 0, "else": 0, "bool_ops": 0}
        scope = list(params)

        body = []
        acc = self.pick(LOCALS)
        self.used_locals.append(acc)
        body.append(node("Assign", ident(acc), self.pick([num(int(rng.integers(0, 3))), ident(params[0])])))
        scope.append(acc)
        if self.labelled:
            body.append(node("Assign", ident(LABEL_VAR), leaf("String", self.pick(LABELS))))
        body += self.stmts(decisions, 1, scope, min_len=0)
        ret = ident(LABEL_VAR) if self.labelled else self.arith(scope, 1)
        body.append(node("Return", ret))
        tree = node("FunctionDef", ident(name), AstNode("Params", None, [ident(p) for p in params]),
                    AstNode("Body", None, body))
        tags = dict(self.tags, verb=verb, noun=noun, labelled=self.labelled, accumulator=acc)
        return Program(tree, name, params, decisions, tags)

    # statements
    def stmts(self, budget: int, depth: int, scope: list[str], min_len: int = 1) -> list[AstNode]:
        out = []
        while budget > 0:
            used, stmt_list = self.construct(budget, depth, scope)
            out += stmt_list
            budget -= used
            if budget > 0 and not self.compact and self.chance(0.3):
                out.append(self.simple(scope))
        while len(out) < min_len:
            out.append(self.simple(scope))
        return out

    def construct(self, budget: int, depth: int, scope: list[str]) -> tuple[int, list[AstNode]]:
        rng = self.rng
        kinds = ["if", "for", "while"] if depth < self.max_depth else ["if"]
        kind = str(rng.choice(kinds, p=[0.5, 0.3, 0.2] if len(kinds) == 3 else None))
        if kind == "if" or depth >= self.max_depth:
            n_elif = int(rng.integers(0, min(budget - 1, 5) + 1))
            used = 1 + n_elif
            inner = self._nested_share(budget - used, depth)
            has_else = self.chance(0.5)
            parts = [self.condition(scope), node("Body", *self.branch_body(inner, depth, scope))]
            for _ in range(n_elif):
                parts.append(node("Elif", self.condition(scope), node("Body", *self.branch_body(0, depth, scope))))
            if has_else:
                parts.append(node("Else", node("Body", *self.branch_body(0, depth, scope))))
            self.tags["if"] += 1
            self.tags["elif"] += n_elif
            self.tags["else"] += has_else
            return used + inner, [AstNode("If", None, parts)]
        inner = self._nested_share(budget - 1, depth)
        if kind == "for" and self.loop_vars:
            var = self.loop_vars.pop(0)
            bound = self.pick(self.params) if self.chance(0.7) else None
            args = [ident(bound)] if bound else [num(int(rng.integers(2, 10)))]
            if self.chance(0.2):
                args = [num(int(rng.integers(0, 3)))] + args
            body = self.stmts(inner, depth + 1, scope + [var], min_len=1)
            if not self.compact and self.chance(0.5):
                body.append(self.simple(scope + [var], prefer=var))
            self.tags["for"] += 1
            return 1 + inner, [node("For", ident(var), node("Call", ident("range"), AstNode("Args", None, args)),
                                    AstNode("Body", None, body))]
        # while: counter loop, or halving a copy of a value
        if self.counters and self.chance(0.6):
            c = self.counters.pop(0)
            bound = self.pick(self.params)
            body = self.stmts(inner, depth + 1, scope + [c], min_len=1)
            body.append(node("AugAdd", ident(c), num(1)))
            pre = node("Assign", ident(c), num(0))
            loop = node("While", node("Lt", ident(c), ident(bound)), AstNode("Body", None, body))
            self.tags["while"] += 1
            return 1 + inner, [pre, loop]
        v = self._fresh_local()
        self.protected.add(v)
        src = self.pick(scope)
        pre = node("Assign", ident(v), node("Call", ident("abs"), node("Args", ident(src))))
        body = self.stmts(inner, depth + 1, scope + [v], min_len=0)
        body.append(node("Assign", ident(v), node("FloorDiv", ident(v), num(2))))
        loop = node("While", node("Gt", ident(v), num(int(rng.integers(0, 2)))), AstNode("Body", None, body))
        self.tags["while"] += 1
        return 1 + inner, [pre, loop]

    def _nested_share(self, remaining: int, depth: int) -> int:
        if remaining <= 0 or depth >= self.max_depth or not self.chance(0.5):
            return 0
        return int(self.rng.integers(1, remaining + 1))

    def _fresh_local(self) -> str:
        free = [v for v in LOCALS if v not in self.used_locals]
        v = self.pick(free) if free else self.pick(LOCALS)
        self.used_locals.append(v)
        return v

    def branch_body(self, budget: int, depth: int, scope: list[str]) -> list[AstNode]:
        out = []
        if self.labelled and self.chance(0.8):
            out.append(node("Assign", ident(LABEL_VAR), leaf("String", self.pick(LABELS))))
        out += self.stmts(budget, depth + 1, scope, min_len=0 if out else 1)
        return out

    def simple(self, scope: list[str], prefer: str | None = None) -> AstNode:
        targets = [v for v in scope if v in self.used_locals and v not in self.protected]
        target = self.pick(targets) if targets else self.used_locals[0]
        rng = self.rng
        r = rng.random()
        operand = ident(prefer) if prefer and self.chance(0.7) else self.arith(scope, 0 if self.compact else 1)
        if r < 0.45 or (self.compact and r < 0.85):
            kind = self.pick(["AugAdd", "AugAdd", "AugSub", "AugMult"])
            if kind == "AugMult":
                operand = num(int(rng.integers(2, 4)))
            return node(kind, ident(target), operand)
        if r < 0.75:
            op = self.pick(["Add", "Sub", "Add"])
            return node("Assign", ident(target), add_parens(node(op, ident(target), operand)))
        if r < 0.9 or self.compact:
            fn = self.pick(["max", "min"])
            return node("Assign", ident(target), node("Call", ident(fn), node("Args", ident(target), operand)))
        return node("Assign", ident(target), self.arith(scope, 2))

    # expressions
    def arith(self, scope: list[str], depth: int) -> AstNode:
        rng = self.rng
        if depth <= 0 or self.chance(0.45):
            return ident(self.pick(scope)) if self.chance(0.75) else num(int(rng.integers(0, 10)))
        op = self.pick(["Add", "Sub", "Mult", "Add", "Mod", "FloorDiv"])
        left = self.arith(scope, depth - 1)
        if op in ("Mod", "FloorDiv"):
            right = num(int(rng.integers(2, 6)))
        else:
            right = self.arith(scope, depth - 1)
        return add_parens(node(op, left, right))

    def condition(self, scope: list[str]) -> AstNode:
        rng = self.rng

        def atom():
            a = ident(self.pick(scope))
            r = rng.random()
            if r < 0.3:
                return node("Eq", node("Mod", a, num(int(rng.integers(2, 4)))), num(0))
            if r < 0.6:
                others = [v for v in scope if v != a.value]
                b = self.pick(others or scope)
                return node(self.pick(["Lt", "Gt", "LtE", "GtE", "NotEq"]), a, ident(b))
            return node(self.pick(["Lt", "Gt", "GtE", "Eq"]), a, num(int(rng.integers(0, 10))))

        c = atom()
        if self.chance(0.1 if self.compact else 0.2):
            c = node(self.pick(["And", "Or"]), c, atom())
            self.tags["bool_ops"] += 1
        elif self.chance(0.08):
            c = node("Not", node("Paren", c))
        return add_parens(c)


DOC_TEMPLATES = (
    "{name} : {verb} the {noun} of {args}{extra}",
    "{verb} {noun} for {args}{extra}",
    "{name} returns the {noun} computed from {args}{extra}",
    "given {args} , {verb} the {noun}{extra}",
)


def describe(prog: Program, rng: np.random.Generator) -> str:
    """Templated description built from the generator's semantic tags."""
    t = prog.tags
    args = " and ".join(prog.params)
    extra = []
    loops = t["for"] + t["while"]
    if loops:
        extra.append("looping " + ("while a condition holds" if t["while"] and not t["for"] else "over a range"))
    if t["if"]:
        extra.append(f"with {t['if'] + t['elif']} checks")
    if t["labelled"]:
        extra.append("returning a label")
    tail = (" , " + " , ".join(extra)) if extra else ""
    tpl = DOC_TEMPLATES[int(rng.integers(len(DOC_TEMPLATES)))]
    return tpl.format(name=prog.name, verb=t["verb"], noun=t["noun"], args=args, extra=tail)


def record_for(prog: Program, doc: str, **meta) -> CorpusRecord:
    classes = prog.token_classes()
    return CorpusRecord.make(prog.code, doc, lang="minipy", meta={
        "name": prog.name,
        "params": prog.params,
        "complexity": prog.decisions + 1,
        "token_classes": classes,
        "class_histogram": {c: classes.count(c) for c in CLASSES},
        "tags": prog.tags,
        **meta,
    })


def generate_program(rng: np.random.Generator, max_tokens: int = 120, decisions: int | None = None,
                     max_tries: int = 60) -> Program:
    gen = ProgramGenerator(rng)
    if decisions is None:
        w = np.asarray(DECISION_WEIGHTS)
        decisions = int(rng.choice(len(w), p=w / w.sum()))
    # keep the drawn decision count across retries so the length cap does not skew it
    while decisions >= 0:
        for _ in range(max_tries):
            prog = gen.function(decisions)
            if prog.model_length() <= max_tokens:
                return prog
        decisions -= 1
    raise RuntimeError(f"no program fits in {max_tokens} tokens")


def generate_toy_corpus(seed: int, size: int, max_tokens: int = 120) -> list[CorpusRecord]:
    """``size`` grammar-valid functions with descriptions; identical seeds give identical corpora."""
    if size < 1:
        raise ValueError("size must be at least 1")
    rng = RngStream(seed).child("corpus").gen
    out = []
    for _ in range(size):
        prog = generate_program(rng, max_tokens)
        out.append(record_for(prog, describe(prog, rng)))
    return out
