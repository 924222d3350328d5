"""Word-level vocabulary over lexer tokens with line-structure markers."""

from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

from ..codeprops.lexer import lex_classify
from ..codeprops.syntax import render

PAD, UNK, CLS, SEP, MASK, NEWLINE, INDENT = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[NEWLINE]",
                                             "[INDENT]")
SPECIALS = (PAD, UNK, CLS, SEP, MASK, NEWLINE, INDENT)
VOCAB_VERSION = "tellylab-vocab 1"


def tokenize(text: str) -> tuple[list[str], list[int]]:
    """Model tokens for ``text`` and, for each lexer token, its position in that list.

    Each line is prefixed with one INDENT per nesting level and a NEWLINE
    follows every line that is terminated by a line break.
    """
    toks = lex_classify(text, strict=False)
    out: list[str] = []
    align: list[int] = []
    stack = [0]
    i = 0
    while i < len(toks):
        line = toks[i].line
        col = toks[i].col
        while col < stack[-1]:
            stack.pop()
        if col > stack[-1]:
            stack.append(col)
        out += [INDENT] * (len(stack) - 1)
        last_end = toks[i].end
        while i < len(toks) and toks[i].line == line:
            align.append(len(out))
            out.append(toks[i].text)
            last_end = toks[i].end
            i += 1
        if "\n" in text[last_end:]:
            out.append(NEWLINE)
    return out, align


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:len(SPECIALS)]) != SPECIALS:
            raise ValueError("special tokens must occupy the lowest ids")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, tok: str) -> int:
        return self.index.get(tok, self.index[UNK])

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def mask_id(self) -> int:
        return self.index[MASK]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def newline_id(self) -> int:
        return self.index[NEWLINE]

    @property
    def special_ids(self) -> list[int]:
        return [self.index[s] for s in SPECIALS]

    def encode_tokens(self, toks: Iterable[str]) -> list[int]:
        return [self.id(t) for t in toks]

    def encode(self, text: str) -> list[int]:
        return self.encode_tokens(tokenize(text)[0])

    def decode(self, ids: Iterable[int]) -> str:
        """Inverse of ``encode`` for in-vocabulary canonical text; PAD/CLS/SEP are dropped."""
        lines, cur, level, closed = [], [], 0, True
        for i in ids:
            t = self.tokens[int(i)]
            if t in (PAD, CLS, SEP):
                continue
            if t == NEWLINE:
                lines.append((level, cur))
                cur, level, closed = [], 0, True
                continue
            closed = False
            if t == INDENT and not cur:
                level += 1
            else:
                cur.append(t)
        text = render(lines)
        if not closed:
            text += render([(level, cur)])[:-1]
        return text

    def save(self, path: str | Path) -> None:
        Path(path).write_text(VOCAB_VERSION + "\n" + "\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines[0] != VOCAB_VERSION:
            raise ValueError(f"{path}: unknown vocabulary version {lines[0]!r}")
        return cls([t for t in lines[1:] if t])


def build_vocab(texts: Iterable[str], min_count: int = 1, extra: Iterable[str] = ()) -> Vocabulary:
    """Specials, then tokens seen at least ``min_count`` times (most frequent first, ties by text), then ``extra``."""
    counts = Counter()
    for text in texts:
        counts.update(t for t in tokenize(text)[0] if t not in SPECIALS)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    seen = set(SPECIALS) | set(kept)
    tail = sorted(t for t in set(extra) if t not in seen)
    return Vocabulary(list(SPECIALS) + kept + tail)
