"""Semantics-preserving rewrites of MiniPy functions.

Every rewrite is checked by running the original and the variant on sample
inputs; variants that change behaviour (or fail to round-trip through the
parser) are rejected.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Callable

import numpy as np

from ..codeprops.interp import run
from ..codeprops.syntax import AstNode, add_parens, node, parse, unparse
from .generator import COUNTERS, LABEL_VAR, LOCALS, LOOP_VARS, PARAMS

Path = tuple[int, ...]
BUILTINS = frozenset({"range", "abs", "min", "max", "len", "str"})
RENAME_POOL = tuple(dict.fromkeys(PARAMS + LOCALS + LOOP_VARS + COUNTERS))


def get_at(tree: AstNode, path: Path) -> AstNode:
    for i in path:
        tree = tree.children[i]
    return tree


def set_at(tree: AstNode, path: Path, new: AstNode) -> AstNode:
    if not path:
        return new
    kids = list(tree.children)
    kids[path[0]] = set_at(kids[path[0]], path[1:], new)
    return replace(tree, children=tuple(kids))


def paths(tree: AstNode, pred: Callable[[AstNode], bool], prefix: Path = ()) -> list[Path]:
    out = [prefix] if pred(tree) else []
    for i, c in enumerate(tree.children):
        out += paths(c, pred, prefix + (i,))
    return out


def names_read(e: AstNode) -> set[str]:
    """Identifiers read by an expression or statement (call targets excluded)."""
    out = set()
    if e.kind == "Call":
        for a in e.children[1].children:
            out |= names_read(a)
        return out
    if e.kind in ("Assign",):
        return names_read(e.children[1])
    if e.kind.startswith("Aug"):
        return {e.children[0].value} | names_read(e.children[1])
    if e.kind == "Identifier":
        return {e.value}
    for c in e.children:
        out |= names_read(c)
    return out


def names_written(s: AstNode) -> set[str]:
    out = set()
    for n in s.walk():
        if n.kind == "Assign" or n.kind.startswith("Aug"):
            out.add(n.children[0].value)
        elif n.kind == "For":
            out.add(n.children[0].value)
    return out


# -- individual rewrites; each returns None when it has no applicable site -------------

def rename_identifiers(tree: AstNode, rng: np.random.Generator) -> AstNode | None:
    fname = tree.children[0].value
    local = sorted({n.value for n in tree.walk() if n.kind == "Identifier"} - BUILTINS - {fname, LABEL_VAR})
    if not local:
        return None
    pool = [p for p in RENAME_POOL if p != fname]
    fresh = [str(x) for x in rng.permutation(pool)[:len(local)]]
    mapping = dict(zip(local, fresh))
    if all(k == v for k, v in mapping.items()):
        return None

    def walk(n: AstNode) -> AstNode:
        if n.kind == "Call":
            return replace(n, children=(n.children[0], walk(n.children[1])))
        if n.kind == "Identifier" and n.value in mapping:
            return replace(n, value=mapping[n.value])
        if n.children:
            return replace(n, children=tuple(walk(c) for c in n.children))
        return n

    name, params, body = tree.children
    return replace(tree, children=(name, walk(params), walk(body)))


def _simple_assign(s: AstNode) -> bool:
    return s.kind == "Assign" or s.kind.startswith("Aug")


def swap_independent(tree: AstNode, rng: np.random.Generator) -> AstNode | None:
    sites = []
    for p in paths(tree, lambda n: n.kind == "Body"):
        stmts = get_at(tree, p).children
        for i in range(len(stmts) - 1):
            a, b = stmts[i], stmts[i + 1]
            if not (_simple_assign(a) and _simple_assign(b)):
                continue
            ta, tb = a.children[0].value, b.children[0].value
            if ta != tb and ta not in names_read(b) and tb not in names_read(a):
                sites.append((p, i))
    if not sites:
        return None
    p, i = sites[int(rng.integers(len(sites)))]
    stmts = list(get_at(tree, p).children)
    stmts[i], stmts[i + 1] = stmts[i + 1], stmts[i]
    return set_at(tree, p, replace(get_at(tree, p), children=tuple(stmts)))


def for_to_while(tree: AstNode, rng: np.random.Generator) -> AstNode | None:
    sites = []
    for p in paths(tree, lambda n: n.kind == "Body"):
        for i, s in enumerate(get_at(tree, p).children):
            if s.kind != "For" or s.children[1].kind != "Call" or s.children[1].children[0].value != "range":
                continue
            args = s.children[1].children[1].children
            var = s.children[0].value
            written = names_written(s.children[2])
            if 1 <= len(args) <= 2 and var not in written and not (names_read(args[-1]) & written):
                sites.append((p, i))
    if not sites:
        return None
    p, i = sites[int(rng.integers(len(sites)))]
    body_node = get_at(tree, p)
    loop = body_node.children[i]
    var, call, body = loop.children
    args = call.children[1].children
    start = args[0] if len(args) == 2 else AstNode("Number", "0")
    init = node("Assign", var, start)
    test = add_parens(node("Lt", var, args[-1]))
    new_body = replace(body, children=body.children + (node("AugAdd", var, AstNode("Number", "1")),))
    stmts = list(body_node.children)
    stmts[i:i + 1] = [init, node("While", test, new_body)]
    return set_at(tree, p, replace(body_node, children=tuple(stmts)))


def toggle_augmented(tree: AstNode, rng: np.random.Generator) -> AstNode | None:
    def expandable(n):
        return n.kind in ("AugAdd", "AugMult")

    def contractible(n):
        return (n.kind == "Assign" and n.children[1].kind in ("Add", "Mult")
                and n.children[1].children[0].kind == "Identifier"
                and n.children[1].children[0].value == n.children[0].value)

    sites = paths(tree, lambda n: expandable(n) or contractible(n))
    if not sites:
        return None
    p = sites[int(rng.integers(len(sites)))]
    s = get_at(tree, p)
    target = s.children[0]
    if expandable(s):
        op = "Add" if s.kind == "AugAdd" else "Mult"
        rhs = s.children[1]
        new = node("Assign", target, add_parens(node(op, target, node("Paren", rhs) if rhs.children else rhs)))
    else:
        rhs = s.children[1].children[1]
        if rhs.kind == "Paren":
            rhs = rhs.children[0]
        new = node("AugAdd" if s.children[1].kind == "Add" else "AugMult", target, rhs)
    return set_at(tree, p, new)


def commute(tree: AstNode, rng: np.random.Generator) -> AstNode | None:
    sites = paths(tree, lambda n: n.kind in ("Add", "Mult"))
    if not sites:
        return None
    p = sites[int(rng.integers(len(sites)))]
    e = get_at(tree, p)
    strip = lambda x: x.children[0] if x.kind == "Paren" else x  # noqa: E731
    swapped = add_parens(node(e.kind, strip(e.children[1]), strip(e.children[0])))
    return set_at(tree, p, swapped)


def negate_if(tree: AstNode, rng: np.random.Generator) -> AstNode | None:
    sites = paths(tree, lambda n: n.kind == "If" and len(n.children) == 3 and n.children[2].kind == "Else")
    if not sites:
        return None
    p = sites[int(rng.integers(len(sites)))]
    test, then, other = get_at(tree, p).children
    inner = test.children[0] if test.kind == "Not" else add_parens(node("Not", node("Paren", test)))
    if test.kind == "Not" and inner.kind == "Paren":
        inner = inner.children[0]
    new = node("If", inner, other.children[0], node("Else", then))
    return set_at(tree, p, new)


TRANSFORMS: dict[str, Callable] = {
    "rename": rename_identifiers,
    "swap": swap_independent,
    "for_to_while": for_to_while,
    "augmented": toggle_augmented,
    "commute": commute,
    "negate_if": negate_if,
}


def sample_inputs(n_params: int, rng: np.random.Generator, count: int = 6) -> list[tuple[int, ...]]:
    fixed = [tuple([0] * n_params), tuple([7] * n_params)]
    rand = [tuple(int(v) for v in rng.integers(-3, 13, size=n_params)) for _ in range(count - len(fixed))]
    return fixed + rand


def semantic_signature(tree: AstNode, inputs) -> tuple:
    """Outputs on ``inputs``; equal signatures are taken as equal behaviour."""
    module = AstNode("Module", None, (tree,))
    name = tree.children[0].value
    return tuple(run(module, name, *args, max_steps=20_000) for args in inputs)


def round_trips(tree: AstNode) -> bool:
    try:
        return parse(unparse(tree)).children == (tree,)
    except SyntaxError:
        return False


def make_variant(tree: AstNode, rng: np.random.Generator, kinds=None, steps: int = 3,
                 inputs=None, max_tries: int = 20) -> tuple[AstNode, list[str]] | None:
    """Apply ``steps`` random rewrites; None if no behaviour-preserving variant was found."""
    kinds = list(kinds or TRANSFORMS)
    if inputs is None:
        inputs = sample_inputs(len(tree.children[1].children), rng)
    reference = semantic_signature(tree, inputs)
    for _ in range(max_tries):
        cur, applied = tree, []
        for _ in range(steps):
            name = kinds[int(rng.integers(len(kinds)))]
            out = TRANSFORMS[name](cur, rng)
            if out is not None:
                cur, applied = out, applied + [name]
        if not applied or not round_trips(cur):
            continue
        if semantic_signature(cur, inputs) == reference:
            return cur, applied
    return None
