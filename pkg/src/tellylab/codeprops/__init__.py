"""Lexical classes, ASTs, AST-Only trees, control-flow graphs and cyclomatic complexity."""

from .cfg import (
    Cfg,
    build_cfg,
    complexity_bucket,
    connected_components,
    cyclomatic,
    decision_points,
    disjoint_union,
)
from .interp import EvalError, Interpreter, run
from .lexer import CLASSES, KEYWORDS, LexError, LexToken, class_histogram, lex_classify, token_texts
from .syntax import (
    AstNode,
    MiniPySyntaxError,
    add_parens,
    ast_only,
    ast_vocabulary,
    deserialize_ast,
    emit_lines,
    functions,
    leaf,
    node,
    parse,
    render,
    render_line,
    serialize_ast,
    serialize_ast_str,
    unparse,
    unparse_tokens,
)


def analyze(source: str) -> dict:
    """Per-file JSON-ready summary: classed tokens, AST-Only, and N/E/P/M per function."""
    tree = parse(source)
    funcs = []
    for f in functions(tree):
        g = build_cfg(f)
        funcs.append({"name": f.children[0].value, **g.summary()})
    return {
        "tokens": [{"text": t.text, "class": t.cls, "span": [t.start, t.end]} for t in lex_classify(source)],
        "ast_only": serialize_ast_str(ast_only(tree)),
        "functions": funcs,
    }
