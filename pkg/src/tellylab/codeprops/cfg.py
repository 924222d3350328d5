"""Control-flow graphs over maximal basic blocks, and cyclomatic complexity.

Conventions:
  * synthetic ENTRY and EXIT nodes; ENTRY feeds the function's first block;
  * an ``if`` test closes the block it sits in, each ``elif`` test gets a block;
  * ``while`` tests get their own block unless the current block is still empty;
  * ``for`` desugars into test, body and step blocks, the step looping to the test;
  * ``return`` jumps to EXIT; statements after it in the same block are dead
    and dropped;
  * ``and``/``or`` add no branches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .syntax import AstNode

ENTRY = "ENTRY"
EXIT = "EXIT"


@dataclass
class Cfg:
    nodes: list[str] = field(default_factory=list)
    edges: set[tuple[str, str]] = field(default_factory=set)
    entry: str = ENTRY
    exit: str = EXIT
    blocks: dict[str, list[AstNode]] = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def validate(self) -> None:
        known = set(self.nodes)
        for a, b in self.edges:
            if a not in known or b not in known:
                raise ValueError(f"edge {a}->{b} has a dangling endpoint")

    def summary(self) -> dict:
        p = connected_components(self)
        return {"N": self.num_nodes, "E": self.num_edges, "P": p, "M": cyclomatic(self)}


class _Builder:
    def __init__(self, prefix: str):
        self.prefix = prefix
        self.cfg = Cfg(entry=prefix + ENTRY, exit=prefix + EXIT)
        self.cfg.nodes += [self.cfg.entry, self.cfg.exit]
        self.count = 0

    def new(self) -> str:
        name = f"{self.prefix}B{self.count}"
        self.count += 1
        self.cfg.nodes.append(name)
        self.cfg.blocks[name] = []
        return name

    def link(self, a: str, b: str) -> None:
        self.cfg.edges.add((a, b))

    def block(self, stmts, cur: str) -> str | None:
        """Lay out ``stmts`` starting in block ``cur``; returns the open block, or None after a return."""
        for s in stmts:
            if cur is None:
                break
            cur = self.stmt(s, cur)
        return cur

    def stmt(self, s: AstNode, cur: str) -> str | None:
        k = s.kind
        if k == "Return":
            self.cfg.blocks[cur].append(s)
            self.link(cur, self.cfg.exit)
            return None
        if k == "If":
            return self._if(s, cur)
        if k == "While":
            test = cur if not self.cfg.blocks[cur] else self._fresh_from(cur)
            self.cfg.blocks[test].append(s.children[0])
            body = self.new()
            self.link(test, body)
            end = self.block(s.children[1].children, body)
            if end is not None:
                self.link(end, test)
            after = self.new()
            self.link(test, after)
            return after
        if k == "For":
            self.cfg.blocks[cur].append(s.children[1])  # range(...) evaluated once
            test = self._fresh_from(cur)
            self.cfg.blocks[test].append(s.children[0])
            body = self.new()
            self.link(test, body)
            end = self.block(s.children[2].children, body)
            step = self.new()
            self.cfg.blocks[step].append(s.children[0])
            if end is not None:
                self.link(end, step)
            self.link(step, test)
            after = self.new()
            self.link(test, after)
            return after
        if k == "FunctionDef":
            raise ValueError("nested function definitions are not supported")
        self.cfg.blocks[cur].append(s)
        return cur

    def _fresh_from(self, cur: str) -> str:
        b = self.new()
        self.link(cur, b)
        return b

    def _if(self, s: AstNode, cur: str) -> str | None:
        c = s.children
        self.cfg.blocks[cur].append(c[0])
        ends: list[str] = []
        then = self._fresh_from(cur)
        ends.append(self.block(c[1].children, then))
        test = cur
        has_else = False
        for part in c[2:]:
            if part.kind == "Elif":
                etest = self._fresh_from(test)
                self.cfg.blocks[etest].append(part.children[0])
                body = self._fresh_from(etest)
                ends.append(self.block(part.children[1].children, body))
                test = etest
            else:
                has_else = True
                body = self._fresh_from(test)
                ends.append(self.block(part.children[0].children, body))
        open_ends = [e for e in ends if e is not None]
        if not has_else:
            open_ends.append(test)
        if not open_ends:
            return None
        join = self.new()
        for e in open_ends:
            self.link(e, join)
        return join


def build_cfg(func: AstNode, prefix: str = "") -> Cfg:
    """CFG for one FunctionDef (a Module holding exactly one function is accepted)."""
    if func.kind == "Module":
        defs = [c for c in func.children if c.kind == "FunctionDef"]
        if len(defs) != 1 or len(func.children) != 1:
            raise ValueError("build_cfg expects a single function")
        func = defs[0]
    if func.kind != "FunctionDef":
        raise ValueError(f"build_cfg expects a FunctionDef, got {func.kind}")
    b = _Builder(prefix)
    first = b.new()
    b.link(b.cfg.entry, first)
    end = b.block(func.children[2].children, first)
    if end is not None:
        b.link(end, b.cfg.exit)
    b.cfg.validate()
    return b.cfg


def disjoint_union(cfgs: list[Cfg]) -> Cfg:
    """Analyse several functions jointly as one graph with several components."""
    out = Cfg(entry=cfgs[0].entry if cfgs else ENTRY, exit=cfgs[0].exit if cfgs else EXIT)
    for i, g in enumerate(cfgs):
        rename = {n: f"f{i}.{n}" for n in g.nodes}
        out.nodes += [rename[n] for n in g.nodes]
        out.edges |= {(rename[a], rename[b]) for a, b in g.edges}
        out.blocks.update({rename[k]: v for k, v in g.blocks.items()})
    if cfgs:
        out.entry, out.exit = "f0." + cfgs[0].entry, "f0." + cfgs[0].exit
    return out


def connected_components(cfg: Cfg) -> int:
    """Undirected component count by union-find."""
    parent = {n: n for n in cfg.nodes}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in cfg.edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    return len({find(n) for n in cfg.nodes})


def cyclomatic(cfg: Cfg) -> int:
    """M = E - N + 2P."""
    return cfg.num_edges - cfg.num_nodes + 2 * connected_components(cfg)


def decision_points(tree: AstNode) -> int:
    """Branching constructs (if, elif, while, for) in a tree."""
    return sum(1 for n in tree.walk() if n.kind in ("If", "Elif", "While", "For"))


def complexity_bucket(m: int, top: int = 10) -> int:
    """Class index 0..top-1 for M = 1..top-1 and M >= top."""
    if m < 1:
        raise ValueError("cyclomatic complexity is at least 1")
    return min(m, top) - 1
