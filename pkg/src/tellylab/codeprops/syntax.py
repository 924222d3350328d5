"""MiniPy abstract syntax: nodes, recursive-descent parser, unparser, AST-Only.

Grammar (indentation delimits blocks, one statement per line)::

    module    := stmt*
    stmt      := "def" NAME "(" [NAME ("," NAME)*] ")" ":" block
               | "if" expr ":" block ("elif" expr ":" block)* ["else" ":" block]
               | "while" expr ":" block
               | "for" NAME "in" expr ":" block
               | "return" [expr] | "pass"
               | NAME ("=" | "+=" | "-=" | "*=" | "//=" | "%=") expr
               | expr
    expr      := or ;  or := and ("or" and)* ;  and := not ("and" not)*
    not       := "not" not | cmp ;  cmp := sum [("=="|"!="|"<"|"<="|">"|">=") sum]
    sum       := term (("+"|"-") term)* ;  term := unary (("*"|"/"|"//"|"%") unary)*
    unary     := "-" unary | atom
    atom      := NAME ["(" [expr ("," expr)*] ")"] | NUMBER | STRING
               | "True" | "False" | "None" | "(" expr ")"
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

from .lexer import (
    IDENTIFIER, KEYWORD, KEYWORDS, NUMBER, OPERATOR, STRING, LexToken, _WORD, lex_classify,
)

TERMINALS = frozenset({"Identifier", "Number", "String", "Constant"})
STATEMENT_KINDS = ("Module", "FunctionDef", "Params", "Body", "Return", "If", "Elif", "Else", "While",
                   "For", "Assign", "AugAdd", "AugSub", "AugMult", "AugFloorDiv", "AugMod", "Pass",
                   "ExprStmt")
EXPRESSION_KINDS = ("Or", "And", "Not", "Eq", "NotEq", "Lt", "LtE", "Gt", "GtE", "Add", "Sub", "Mult",
                    "Div", "FloorDiv", "Mod", "Neg", "Paren", "Call", "Args",
                    "Identifier", "Number", "String", "Constant")
AST_KINDS = STATEMENT_KINDS + EXPRESSION_KINDS

BINARY_OPS = {"+": "Add", "-": "Sub", "*": "Mult", "/": "Div", "//": "FloorDiv", "%": "Mod",
              "==": "Eq", "!=": "NotEq", "<": "Lt", "<=": "LtE", ">": "Gt", ">=": "GtE",
              "and": "And", "or": "Or"}
AUG_OPS = {"+=": "AugAdd", "-=": "AugSub", "*=": "AugMult", "//=": "AugFloorDiv", "%=": "AugMod"}
OP_TEXT = {v: k for k, v in {**BINARY_OPS, **AUG_OPS}.items()}
COMPARISONS = ("==", "!=", "<", "<=", ">", ">=")


@dataclass(frozen=True)
class AstNode:
    kind: str
    value: str | None = None
    children: tuple["AstNode", ...] = field(default=())

    def __post_init__(self):
        if self.value is not None and self.kind not in TERMINALS:
            raise ValueError(f"nonterminal {self.kind} cannot carry a value")
        object.__setattr__(self, "children", tuple(self.children))

    @property
    def is_terminal(self) -> bool:
        return self.kind in TERMINALS

    def walk(self) -> Iterator["AstNode"]:
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def size(self) -> int:
        return sum(1 for _ in self.walk())

    def __repr__(self) -> str:
        head = f"{self.kind}:{self.value!r}" if self.value is not None else self.kind
        if not self.children:
            return head
        return f"{head}({', '.join(map(repr, self.children))})"


def leaf(kind: str, value: str | None = None) -> AstNode:
    return AstNode(kind, value)


def node(kind: str, *children: AstNode) -> AstNode:
    return AstNode(kind, None, children)


class MiniPySyntaxError(SyntaxError):
    def __init__(self, message: str, line: int, col: int, expected: tuple[str, ...] = ()):
        detail = f" (expected one of {', '.join(expected)})" if expected else ""
        super().__init__(f"line {line + 1}, column {col + 1}: {message}{detail}")
        self.line, self.col, self.expected = line, col, tuple(expected)


# -- parsing -----------------------------------------------------------------------

@dataclass
class _Line:
    indent: int
    tokens: list[LexToken]


def _logical_lines(tokens: list[LexToken]) -> list[_Line]:
    lines: list[_Line] = []
    for tok in tokens:
        if lines and lines[-1].tokens[-1].line == tok.line:
            lines[-1].tokens.append(tok)
        else:
            lines.append(_Line(tok.col, [tok]))
    return lines


class _Parser:
    def __init__(self, source: str):
        self.lines = _logical_lines(lex_classify(source))
        self.li = 0
        self.toks: list[LexToken] = []
        self.i = 0

    # token cursor within the current line
    def peek(self) -> LexToken | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def at(self, *texts: str) -> bool:
        t = self.peek()
        return t is not None and t.text in texts and t.cls in (OPERATOR, KEYWORD)

    def fail(self, message: str, expected: tuple[str, ...] = ()):
        t = self.peek()
        if t is None:
            last = self.toks[-1] if self.toks else None
            line, col = (last.line, last.col + len(last.text)) if last else (0, 0)
            message = f"{message} at end of line"
        else:
            line, col = t.line, t.col
        raise MiniPySyntaxError(message, line, col, expected)

    def expect(self, text: str) -> LexToken:
        if not self.at(text):
            self.fail(f"unexpected {self._desc()}", (repr(text),))
        t = self.peek()
        self.i += 1
        return t

    def name(self) -> AstNode:
        t = self.peek()
        if t is None or t.cls != IDENTIFIER:
            self.fail(f"unexpected {self._desc()}", ("identifier",))
        self.i += 1
        return leaf("Identifier", t.text)

    def _desc(self) -> str:
        t = self.peek()
        return "end of line" if t is None else repr(t.text)

    def end_of_line(self):
        if self.peek() is not None:
            self.fail(f"unexpected {self._desc()}", ("end of line",))

    # blocks
    def module(self) -> AstNode:
        body = self.block(0) if self.lines else []
        if self.li < len(self.lines):
            t = self.lines[self.li].tokens[0]
            raise MiniPySyntaxError("unexpected indent", t.line, t.col)
        return AstNode("Module", None, body)

    def block(self, indent: int) -> list[AstNode]:
        stmts = []
        while self.li < len(self.lines) and self.lines[self.li].indent == indent:
            stmts.append(self.statement(indent))
        return stmts

    def load_line(self):
        self.toks = self.lines[self.li].tokens
        self.i = 0
        self.li += 1

    def suite(self, indent: int) -> AstNode:
        """Body after a header that ended in ':' (inline simple statement or indented block)."""
        if self.peek() is not None:
            return node("Body", self.simple())
        if self.li >= len(self.lines) or self.lines[self.li].indent <= indent:
            self.fail("expected an indented block", ("indented block",))
        inner = self.lines[self.li].indent
        return AstNode("Body", None, self.block(inner))

    def statement(self, indent: int) -> AstNode:
        self.load_line()
        t = self.peek()
        if t.cls == KEYWORD and t.text == "def":
            self.i += 1
            name = self.name()
            self.expect("(")
            params = []
            if not self.at(")"):
                params.append(self.name())
                while self.at(","):
                    self.i += 1
                    params.append(self.name())
            self.expect(")")
            self.expect(":")
            return node("FunctionDef", name, AstNode("Params", None, params), self.suite(indent))
        if t.cls == KEYWORD and t.text == "if":
            self.i += 1
            test = self.expr()
            self.expect(":")
            parts = [test, self.suite(indent)]
            while self._continues(indent, "elif"):
                self.load_line()
                self.i += 1
                etest = self.expr()
                self.expect(":")
                parts.append(node("Elif", etest, self.suite(indent)))
            if self._continues(indent, "else"):
                self.load_line()
                self.i += 1
                self.expect(":")
                parts.append(node("Else", self.suite(indent)))
            return AstNode("If", None, parts)
        if t.cls == KEYWORD and t.text == "while":
            self.i += 1
            test = self.expr()
            self.expect(":")
            return node("While", test, self.suite(indent))
        if t.cls == KEYWORD and t.text == "for":
            self.i += 1
            target = self.name()
            self.expect("in")
            it = self.expr()
            self.expect(":")
            return node("For", target, it, self.suite(indent))
        if t.cls == KEYWORD and t.text in ("elif", "else"):
            self.fail(f"{t.text!r} without a matching 'if'")
        return self.simple()

    def _continues(self, indent: int, keyword: str) -> bool:
        if self.li >= len(self.lines):
            return False
        line = self.lines[self.li]
        head = line.tokens[0]
        return line.indent == indent and head.cls == KEYWORD and head.text == keyword

    def simple(self) -> AstNode:
        t = self.peek()
        if t.cls == KEYWORD and t.text == "pass":
            self.i += 1
            out = node("Pass")
        elif t.cls == KEYWORD and t.text == "return":
            self.i += 1
            out = node("Return") if self.peek() is None else node("Return", self.expr())
        elif (t.cls == IDENTIFIER and self.i + 1 < len(self.toks)
              and self.toks[self.i + 1].text in ("=", *AUG_OPS)):
            target = self.name()
            op = self.peek().text
            self.i += 1
            value = self.expr()
            out = node("Assign" if op == "=" else AUG_OPS[op], target, value)
        else:
            out = node("ExprStmt", self.expr())
        self.end_of_line()
        return out

    # expressions
    def expr(self) -> AstNode:
        return self._binary_chain(self._and, ("or",))

    def _and(self) -> AstNode:
        return self._binary_chain(self._not, ("and",))

    def _binary_chain(self, sub, ops) -> AstNode:
        left = sub()
        while self.at(*ops):
            op = self.peek().text
            self.i += 1
            left = node(BINARY_OPS[op], left, sub())
        return left

    def _not(self) -> AstNode:
        if self.at("not"):
            self.i += 1
            return node("Not", self._not())
        return self._cmp()

    def _cmp(self) -> AstNode:
        left = self._sum()
        if self.at(*COMPARISONS):
            op = self.peek().text
            self.i += 1
            left = node(BINARY_OPS[op], left, self._sum())
            if self.at(*COMPARISONS):
                self.fail("chained comparisons are not supported")
        return left

    def _sum(self) -> AstNode:
        return self._binary_chain(self._term, ("+", "-"))

    def _term(self) -> AstNode:
        return self._binary_chain(self._unary, ("*", "/", "//", "%"))

    def _unary(self) -> AstNode:
        if self.at("-"):
            self.i += 1
            return node("Neg", self._unary())
        return self._atom()

    def _atom(self) -> AstNode:
        t = self.peek()
        expected = ("identifier", "number", "string", "'('", "True", "False", "None")
        if t is None:
            self.fail("expression expected", expected)
        if t.cls == IDENTIFIER:
            self.i += 1
            name = leaf("Identifier", t.text)
            if self.at("("):
                self.i += 1
                args = []
                if not self.at(")"):
                    args.append(self.expr())
                    while self.at(","):
                        self.i += 1
                        args.append(self.expr())
                self.expect(")")
                return node("Call", name, AstNode("Args", None, args))
            return name
        if t.cls == NUMBER:
            self.i += 1
            return leaf("Number", t.text)
        if t.cls == STRING:
            self.i += 1
            return leaf("String", t.text)
        if t.cls == KEYWORD and t.text in ("True", "False", "None"):
            self.i += 1
            return leaf("Constant", t.text)
        if self.at("("):
            self.i += 1
            inner = self.expr()
            self.expect(")")
            return node("Paren", inner)
        self.fail(f"unexpected {self._desc()}", expected)


def parse(source: str) -> AstNode:
    """Parse MiniPy source into a Module node whose terminals carry their text."""
    return _Parser(source).module()


# -- unparsing ---------------------------------------------------------------------

Line = tuple[int, list[tuple[str, str]]]  # (indent level, [(text, class)])


def emit_lines(tree: AstNode) -> list[Line]:
    """Canonical classed token lines for a statement-level tree."""
    lines: list[Line] = []
    _emit_stmt(tree, 0, lines)
    return lines


def _emit_block(stmts, level: int, lines: list[Line]):
    for s in stmts:
        _emit_stmt(s, level, lines)


def _emit_stmt(s: AstNode, level: int, lines: list[Line]):
    k, c = s.kind, s.children
    kw = lambda text: (text, KEYWORD)  # noqa: E731
    op = lambda text: (text, OPERATOR)  # noqa: E731
    if k == "Module":
        _emit_block(c, level, lines)
    elif k == "FunctionDef":
        name, params, body = c
        toks = [kw("def"), (name.value, IDENTIFIER), op("(")]
        for i, p in enumerate(params.children):
            if i:
                toks.append(op(","))
            toks.append((p.value, IDENTIFIER))
        lines.append((level, toks + [op(")"), op(":")]))
        _emit_block(body.children, level + 1, lines)
    elif k == "If":
        lines.append((level, [kw("if"), *_expr(c[0]), op(":")]))
        _emit_block(c[1].children, level + 1, lines)
        for part in c[2:]:
            if part.kind == "Elif":
                lines.append((level, [kw("elif"), *_expr(part.children[0]), op(":")]))
                _emit_block(part.children[1].children, level + 1, lines)
            else:
                lines.append((level, [kw("else"), op(":")]))
                _emit_block(part.children[0].children, level + 1, lines)
    elif k == "While":
        lines.append((level, [kw("while"), *_expr(c[0]), op(":")]))
        _emit_block(c[1].children, level + 1, lines)
    elif k == "For":
        lines.append((level, [kw("for"), (c[0].value, IDENTIFIER), kw("in"), *_expr(c[1]), op(":")]))
        _emit_block(c[2].children, level + 1, lines)
    elif k == "Return":
        lines.append((level, [kw("return"), *(_expr(c[0]) if c else [])]))
    elif k == "Pass":
        lines.append((level, [kw("pass")]))
    elif k == "Assign" or k in OP_TEXT and k.startswith("Aug"):
        sym = "=" if k == "Assign" else OP_TEXT[k]
        lines.append((level, [(c[0].value, IDENTIFIER), op(sym), *_expr(c[1])]))
    elif k == "ExprStmt":
        lines.append((level, _expr(c[0])))
    else:
        raise ValueError(f"not a statement: {k}")


_TERMINAL_CLASS = {"Identifier": IDENTIFIER, "Number": NUMBER, "String": STRING, "Constant": KEYWORD}


def _expr(e: AstNode) -> list[tuple[str, str]]:
    k, c = e.kind, e.children
    if k in _TERMINAL_CLASS:
        if e.value is None:
            raise ValueError("cannot unparse a terminal without a value")
        return [(e.value, _TERMINAL_CLASS[k])]
    if k in ("And", "Or"):
        return [*_expr(c[0]), (OP_TEXT[k], KEYWORD), *_expr(c[1])]
    if k in OP_TEXT:
        return [*_expr(c[0]), (OP_TEXT[k], OPERATOR), *_expr(c[1])]
    if k == "Not":
        return [("not", KEYWORD), *_expr(c[0])]
    if k == "Neg":
        return [("-", OPERATOR), *_expr(c[0])]
    if k == "Paren":
        return [("(", OPERATOR), *_expr(c[0]), (")", OPERATOR)]
    if k == "Call":
        out = [(c[0].value, IDENTIFIER), ("(", OPERATOR)]
        for i, a in enumerate(c[1].children):
            if i:
                out.append((",", OPERATOR))
            out += _expr(a)
        return out + [(")", OPERATOR)]
    raise ValueError(f"not an expression: {k}")


def _is_name(text: str) -> bool:
    return bool(_WORD.fullmatch(text)) and text not in KEYWORDS


def render_line(texts: list[str]) -> str:
    """Join token texts with the canonical spacing rule."""
    out = []
    prev = None
    unary = False
    for t in texts:
        if prev is None:
            out.append(t)
        else:
            tight = (t in (")", ",", ":", "]") or prev in ("(", "[") or unary
                     or (t == "(" and _is_name(prev)))
            out.append(t if tight else " " + t)
        # a minus is unary at line start or after an operator/keyword (but not ')')
        unary = t == "-" and (prev is None or (prev not in (")", "]") and not _is_name(prev)
                                                and not prev[0].isdigit() and prev[0] not in "\"'"
                                                and prev not in ("True", "False", "None")))
        prev = t
    return "".join(out)


def render(lines, indent_unit: str = "    ") -> str:
    """Source text for ``(level, tokens)`` lines; tokens may be texts or (text, class) pairs."""
    rows = []
    for level, toks in lines:
        texts = [t if isinstance(t, str) else t[0] for t in toks]
        rows.append(indent_unit * level + render_line(texts))
    return "".join(r + "\n" for r in rows)


def unparse(tree: AstNode) -> str:
    return render(emit_lines(tree))


def unparse_tokens(tree: AstNode) -> list[tuple[str, str]]:
    return [t for _, toks in emit_lines(tree) for t in toks]


# -- AST-Only ------------------------------------------------------------------------

def ast_only(tree: AstNode) -> AstNode:
    """Same shape and kinds with every terminal value removed."""
    if tree.is_terminal:
        return AstNode(tree.kind) if tree.value is not None else tree
    return replace(tree, children=tuple(ast_only(c) for c in tree.children))


def ast_vocabulary() -> list[str]:
    """Every token serialize_ast can emit."""
    return sorted({f"({k}" for k in AST_KINDS} | {f"({k})" for k in AST_KINDS} | {")"})


def serialize_ast(tree: AstNode) -> list[str]:
    """Bracketed pre-order tokens: a leaf is "(Kind)", an inner node "(Kind" ... ")"."""
    if tree.value is not None:
        raise ValueError("serialize_ast expects an AST-Only tree")
    if not tree.children:
        return [f"({tree.kind})"]
    out = [f"({tree.kind}"]
    for c in tree.children:
        out += serialize_ast(c)
    out.append(")")
    return out


def serialize_ast_str(tree: AstNode) -> str:
    return " ".join(serialize_ast(tree))


def deserialize_ast(tokens) -> AstNode:
    if isinstance(tokens, str):
        tokens = tokens.split()
    pos = 0

    def read() -> AstNode:
        nonlocal pos
        if pos >= len(tokens):
            raise ValueError("truncated AST serialization")
        t = tokens[pos]
        pos += 1
        if t.startswith("(") and t.endswith(")") and len(t) > 2:
            return AstNode(t[1:-1])
        if not t.startswith("(") or len(t) < 2:
            raise ValueError(f"bad AST token {t!r}")
        children = []
        while pos < len(tokens) and tokens[pos] != ")":
            children.append(read())
        if pos >= len(tokens):
            raise ValueError("unbalanced AST serialization")
        pos += 1
        return AstNode(t[1:], None, children)

    tree = read()
    if pos != len(tokens):
        raise ValueError("trailing tokens after AST serialization")
    return tree


def functions(module: AstNode) -> list[AstNode]:
    return [c for c in module.children if c.kind == "FunctionDef"]


_PREC = {"Or": 1, "And": 2, "Not": 3, "Eq": 4, "NotEq": 4, "Lt": 4, "LtE": 4, "Gt": 4, "GtE": 4,
         "Add": 5, "Sub": 5, "Mult": 6, "Div": 6, "FloorDiv": 6, "Mod": 6, "Neg": 7}


def _prec(e: AstNode) -> int:
    return _PREC.get(e.kind, 8)


def add_parens(e: AstNode) -> AstNode:
    """Insert Paren nodes wherever the grammar would otherwise re-associate ``e``."""
    if e.is_terminal or not e.children:
        return e
    kids = [add_parens(c) for c in e.children]
    p = _PREC.get(e.kind)
    if p is None:
        return replace(e, children=tuple(kids))
    wrap = lambda c: node("Paren", c)  # noqa: E731
    if e.kind in ("Not", "Neg"):
        kids = [wrap(kids[0]) if _prec(kids[0]) < p else kids[0]]
    elif p == 4:
        kids = [wrap(c) if _prec(c) <= p else c for c in kids]
    else:
        left, right = kids
        kids = [wrap(left) if _prec(left) < p else left, wrap(right) if _prec(right) <= p else right]
    return replace(e, children=tuple(kids))
