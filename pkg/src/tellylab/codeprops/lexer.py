"""Lexer for MiniPy that labels every token with one of five lexical classes.

Delimiters and punctuation are folded into ``Operator``. Arbitrary text is
handled leniently: unknown punctuation becomes an Operator, unknown words
become Identifiers.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

IDENTIFIER = "Identifier"
KEYWORD = "Keyword"
OPERATOR = "Operator"
NUMBER = "Number"
STRING = "String"
CLASSES = (IDENTIFIER, KEYWORD, OPERATOR, NUMBER, STRING)

KEYWORDS = frozenset({
    "def", "return", "if", "elif", "else", "while", "for", "in", "pass",
    "and", "or", "not", "True", "False", "None",
})

# longest first so "//=" wins over "//" and "/"
OPERATORS = ("//=", "==", "!=", "<=", ">=", "//", "+=", "-=", "*=", "%=", "->",
             "+", "-", "*", "/", "%", "<", ">", "=", "(", ")", "[", "]", "{", "}",
             ":", ",", ".", ";")

_WORD = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NUMBER = re.compile(r"[0-9]+(?:\.[0-9]+)?")


class LexError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


@dataclass(frozen=True)
class LexToken:
    text: str
    cls: str
    start: int
    end: int
    line: int = 0
    col: int = 0


def lex_classify(source: str, strict: bool = True) -> list[LexToken]:
    """Split ``source`` into classified tokens, skipping whitespace.

    With ``strict=False`` an unterminated quote is emitted as an Operator
    instead of raising.
    """
    out: list[LexToken] = []
    i, n = 0, len(source)
    line, line_start = 0, 0
    while i < n:
        ch = source[i]
        if ch == "\n":
            line += 1
            line_start = i + 1
            i += 1
            continue
        if ch.isspace():
            i += 1
            continue
        if ch in "\"'":
            j = i + 1
            while j < n and source[j] != ch:
                if source[j] == "\n":
                    break
                j += 2 if source[j] == "\\" else 1
            if j < n and source[j] == ch:
                end, cls = j + 1, STRING
            elif strict:
                raise LexError("unterminated string", i)
            else:
                end, cls = i + 1, OPERATOR
        elif (m := _WORD.match(source, i)):
            end = m.end()
            cls = KEYWORD if m.group() in KEYWORDS else IDENTIFIER
        elif (m := _NUMBER.match(source, i)):
            end = m.end()
            cls = NUMBER
        else:
            op = next((o for o in OPERATORS if source.startswith(o, i)), ch)
            end = i + len(op)
            cls = OPERATOR
        out.append(LexToken(source[i:end], cls, i, end, line, i - line_start))
        i = end
    return out


def token_texts(source: str) -> list[str]:
    return [t.text for t in lex_classify(source)]


def class_histogram(tokens) -> dict:
    hist = {c: 0 for c in CLASSES}
    for t in tokens:
        hist[t.cls if isinstance(t, LexToken) else t[1]] += 1
    return hist
