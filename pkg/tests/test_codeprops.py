from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tellylab.codeprops import (
    AstNode,
    Cfg,
    LexError,
    MiniPySyntaxError,
    analyze,
    ast_only,
    build_cfg,
    complexity_bucket,
    connected_components,
    cyclomatic,
    deserialize_ast,
    disjoint_union,
    functions,
    leaf,
    lex_classify,
    node,
    parse,
    run,
    serialize_ast,
    serialize_ast_str,
    token_texts,
    unparse,
    unparse_tokens,
)
from tellylab.codeprops.syntax import AST_KINDS, TERMINALS
from tellylab.corpus import generate_program
from tellylab.corpus.transforms import rename_identifiers

FIG_EXAMPLE = """def total(n):
    s = 0
    for i in range(n):
        s = s + i
    return s
"""


def programs(count, seed):
    rng = np.random.default_rng(seed)
    return [generate_program(rng) for _ in range(count)]


@pytest.fixture(scope="module")
def five_hundred():
    return programs(500, 11)


# -- lexer ------------------------------------------------------------------------------

def test_lex_example():
    got = [(t.text, t.cls) for t in lex_classify("def f(x): return x + 1")]
    assert got == [("def", "Keyword"), ("f", "Identifier"), ("(", "Operator"), ("x", "Identifier"),
                   (")", "Operator"), (":", "Operator"), ("return", "Keyword"), ("x", "Identifier"),
                   ("+", "Operator"), ("1", "Number")]


def test_lex_string():
    toks = lex_classify('"hi"')
    assert [(t.text, t.cls) for t in toks] == [('"hi"', "String")]
    assert lex_classify(r'"a\"b"')[0].text == r'"a\"b"'


def test_lex_unterminated_string():
    with pytest.raises(LexError) as err:
        lex_classify('x = "oops')
    assert err.value.offset == 4
    lenient = lex_classify("it's", strict=False)
    assert [t.cls for t in lenient] == ["Identifier", "Operator", "Identifier"]


def test_lex_lenient_on_arbitrary_text():
    toks = lex_classify("a @ b $ 3.5 while")
    assert [t.cls for t in toks] == ["Identifier", "Operator", "Identifier", "Operator", "Number", "Keyword"]


def test_lex_multichar_operators():
    assert token_texts("a //= b <= c != d") == ["a", "//=", "b", "<=", "c", "!=", "d"]


def test_lex_classes_match_generator_labels(five_hundred):
    total = Counter()
    for prog in five_hundred:
        classes = [t.cls for t in lex_classify(prog.code)]
        assert classes == prog.token_classes()
        total.update(classes)
    assert set(total) == {"Identifier", "Keyword", "Operator", "Number", "String"}


def test_lexer_totality(five_hundred):
    for prog in five_hundred[:100]:
        src = prog.code
        toks = lex_classify(src)
        rebuilt, pos = [], 0
        for t in toks:
            gap = src[pos:t.start]
            assert gap.strip() == ""
            rebuilt += [gap, t.text]
            pos = t.end
        rebuilt.append(src[pos:])
        assert "".join(rebuilt) == src
        assert all(a.end <= b.start for a, b in zip(toks, toks[1:]))


# -- parser -------------------------------------------------------------------------------

def test_parse_assignment_shape():
    tree = parse("x = 1")
    assert tree.children == (node("Assign", leaf("Identifier", "x"), leaf("Number", "1")),)


def test_nested_if_child_order():
    src = "if a:\n    if b:\n        x = 1\n    else:\n        x = 2\nelif c:\n    x = 3\nelse:\n    x = 4\n"
    top = parse(src).children[0]
    assert [c.kind for c in top.children] == ["Identifier", "Body", "Elif", "Else"]
    inner = top.children[1].children[0]
    assert [c.kind for c in inner.children] == ["Identifier", "Body", "Else"]
    values = [n.value for n in top.walk() if n.kind == "Number"]
    assert values == ["1", "2", "3", "4"]


def test_precedence():
    e = parse("y = a + b * c - d").children[0].children[1]
    assert e.kind == "Sub" and e.children[0].kind == "Add" and e.children[0].children[1].kind == "Mult"
    e = parse("y = not a < b and c or d").children[0].children[1]
    assert e.kind == "Or" and e.children[0].kind == "And" and e.children[0].children[0].kind == "Not"


@pytest.mark.parametrize("src,line,col,expected", [
    ("x = (1 + 2\n", 0, 10, "')'"),
    ("def f(:\n    pass\n", 0, 6, "identifier"),
    ("if x:\nreturn 1\n", 0, 5, "indented block"),
    ("x = 1\n    y = 2\n", 1, 4, None),
    ("x = 1 +\n", 0, 7, "number"),
])
def test_syntax_errors(src, line, col, expected):
    with pytest.raises(MiniPySyntaxError) as err:
        parse(src)
    assert (err.value.line, err.value.col) == (line, col)
    if expected:
        assert expected in err.value.expected


def test_round_trip_on_generated(five_hundred):
    for prog in five_hundred:
        src = prog.code
        assert token_texts(unparse(parse(src))) == token_texts(src)
        assert unparse(parse(src)) == src


def test_round_trip_noncanonical_spacing():
    src = "def g( a,b ):\n  if a>b: return a-(b*2)\n  while(a<3):\n      a+=1\n  return -a\n"
    tree = parse(src)
    assert token_texts(unparse(tree)) == token_texts(src)
    assert parse(unparse(tree)) == tree


def test_unparse_tokens_classes():
    tree = parse(FIG_EXAMPLE)
    assert [c for _, c in unparse_tokens(tree)] == [t.cls for t in lex_classify(FIG_EXAMPLE)]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_property(seed):
    prog = generate_program(np.random.default_rng(seed))
    tree = parse(prog.code)
    assert parse(unparse(tree)) == tree
    assert tree.children[0] == prog.tree


# -- AST-Only and serialization ------------------------------------------------------------

def test_ast_only_definition():
    tree = parse("x = 1").children[0]
    assert ast_only(tree) == node("Assign", leaf("Identifier"), leaf("Number"))


def test_ast_only_preserves_shape(five_hundred):
    for prog in five_hundred[:100]:
        tree = parse(prog.code)
        stripped = ast_only(tree)
        assert ast_only(stripped) == stripped
        assert stripped.size() == tree.size()
        assert Counter(n.kind for n in stripped.walk()) == Counter(n.kind for n in tree.walk())
        assert sum(n.value is not None for n in stripped.walk()) == 0


def test_renamed_programs_share_ast_only(five_hundred):
    rng = np.random.default_rng(0)
    for prog in five_hundred[:100]:
        renamed = rename_identifiers(prog.tree, rng)
        if renamed is None:
            continue
        assert renamed != prog.tree
        assert ast_only(renamed) == ast_only(prog.tree)
        a, b = build_cfg(prog.tree), build_cfg(renamed)
        assert (a.num_nodes, a.num_edges, cyclomatic(a)) == (b.num_nodes, b.num_edges, cyclomatic(b))


def test_serialize_single_terminal():
    assert serialize_ast_str(leaf("Number")) == "(Number)"
    assert serialize_ast_str(ast_only(parse("x = 1"))) == "(Module (Assign (Identifier) (Number) ) )"
    with pytest.raises(ValueError):
        serialize_ast(leaf("Number", "1"))


def random_tree(rng, depth=0):
    kind = AST_KINDS[int(rng.integers(len(AST_KINDS)))]
    if kind in TERMINALS or depth > 3:
        return AstNode(kind)
    return AstNode(kind, None, [random_tree(rng, depth + 1) for _ in range(int(rng.integers(0, 4)))])


def test_serialization_injective_and_invertible():
    rng = np.random.default_rng(5)
    trees = [random_tree(rng) for _ in range(1000)]
    by_text = {}
    for t in trees:
        text = serialize_ast_str(t)
        assert by_text.setdefault(text, t) == t
        assert deserialize_ast(text) == t
    assert len(by_text) == len(set(trees))


def test_deserialize_rejects_garbage():
    for bad in ["(Assign (Number)", "(Number) (Number)", ")", ""]:
        with pytest.raises(ValueError):
            deserialize_ast(bad)


# -- CFG and cyclomatic complexity -----------------------------------------------------------

def test_straight_line_is_path():
    g = build_cfg(parse("def f(a):\n    b = a\n    c = b + 1\n    return c\n"))
    assert g.num_edges == g.num_nodes - 1
    outdeg = Counter(a for a, _ in g.edges)
    indeg = Counter(b for _, b in g.edges)
    assert max(outdeg.values()) == 1 and max(indeg.values()) == 1
    assert cyclomatic(g) == 1


def test_figure_example():
    g = build_cfg(parse(FIG_EXAMPLE))
    assert (g.num_nodes, g.num_edges) == (7, 7)
    assert connected_components(g) == 1
    assert cyclomatic(g) == 2
    assert complexity_bucket(cyclomatic(g)) + 1 == 2


def test_while_containing_if():
    src = "def f(n):\n    while n > 0:\n        if n % 2 == 0:\n            n = n - 3\n        n = n - 1\n    return n\n"
    g = build_cfg(parse(src))
    assert g.num_edges - g.num_nodes + 2 == 3


def test_cyclomatic_formula_direct():
    g = Cfg(nodes=[str(i) for i in range(7)],
            edges={("0", "1"), ("1", "2"), ("2", "3"), ("3", "4"), ("4", "2"), ("2", "5"), ("5", "6")})
    assert cyclomatic(g) == 7 - 7 + 2
    assert cyclomatic(Cfg(nodes=["B"], edges=set())) == 1


def test_short_circuit_adds_no_branch():
    a = build_cfg(parse("def f(a, b):\n    if a and b:\n        a = 1\n    return a\n"))
    b = build_cfg(parse("def f(a, b):\n    if a:\n        a = 1\n    return a\n"))
    assert cyclomatic(a) == cyclomatic(b) == 2


def predicate_oracle(src: str) -> int:
    """Decision keywords counted straight from the token stream."""
    return sum(t.cls == "Keyword" and t.text in ("if", "elif", "while", "for") for t in lex_classify(src)) + 1


def test_cyclomatic_matches_predicate_oracle():
    for prog in programs(100, 3):
        g = build_cfg(parse(prog.code))
        assert connected_components(g) == 1
        assert cyclomatic(g) == predicate_oracle(prog.code)


def test_returns_inside_branches():
    src = ("def f(a):\n    for i in range(a):\n        if i > 3:\n            return i\n"
           "    if a:\n        return 1\n    else:\n        return 2\n")
    g = build_cfg(parse(src))
    assert cyclomatic(g) == predicate_oracle(src) == 4


def test_adding_a_conditional_adds_one(five_hundred):
    for prog in five_hundred[:100]:
        fdef = prog.tree
        name, params, body = fdef.children
        guard = node("If", leaf("Identifier", params.children[0].value), node("Body", node("Pass")))
        bigger = node("FunctionDef", name, params, AstNode("Body", None, (guard,) + body.children))
        assert cyclomatic(build_cfg(bigger)) == cyclomatic(build_cfg(fdef)) + 1


def test_components_of_disjoint_functions():
    src = FIG_EXAMPLE + "def g(x):\n    return x\n"
    graphs = [build_cfg(f, prefix=f"f{i}.") for i, f in enumerate(functions(parse(src)))]
    assert all(connected_components(g) == 1 for g in graphs)
    assert connected_components(disjoint_union(graphs)) == 2


def brute_components(nodes, edges):
    adj = {n: {n} for n in nodes}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    reach = {n: set(adj[n]) for n in nodes}
    changed = True
    while changed:
        changed = False
        for n in nodes:
            new = set().union(*(reach[m] for m in reach[n]))
            if new != reach[n]:
                reach[n], changed = new, True
    return len({frozenset(r) for r in reach.values()})


def test_components_vs_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(1, 15))
        nodes = [f"n{i}" for i in range(n)]
        edges = {(nodes[int(rng.integers(n))], nodes[int(rng.integers(n))]) for _ in range(int(rng.integers(0, n + 2)))}
        assert connected_components(Cfg(nodes=nodes, edges=edges)) == brute_components(nodes, edges)


def test_complexity_bucket():
    assert [complexity_bucket(m) for m in (1, 2, 9, 10, 15)] == [0, 1, 8, 9, 9]
    with pytest.raises(ValueError):
        complexity_bucket(0)


def test_interpreter_and_analyze():
    assert run(parse(FIG_EXAMPLE), "total", 5) == 10
    report = analyze(FIG_EXAMPLE)
    assert report["functions"] == [{"name": "total", "N": 7, "E": 7, "P": 1, "M": 2}]
    assert report["ast_only"].startswith("(Module (FunctionDef (Identifier)")
    assert len(report["tokens"]) == len(lex_classify(FIG_EXAMPLE))


def test_interpreter_errors_are_reported():
    tree = parse("def f(a):\n    while a > 0:\n        a = a + 1\n    return a\n")
    assert run(tree, "f", 1, max_steps=100) == "<StepLimit>"
    assert run(parse("def g(a):\n    return b\n"), "g", 1) == "<EvalError>"
