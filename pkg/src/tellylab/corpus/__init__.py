"""Toy MiniPy corpus generation, JSONL ingestion, vocabulary and splits."""

from .generator import Program, ProgramGenerator, describe, generate_program, generate_toy_corpus, record_for
from .records import (
    CorpusRecord,
    ReadResult,
    SplitSpec,
    content_id,
    make_splits,
    read_jsonl,
    split_of,
    write_jsonl,
)
from .transforms import TRANSFORMS, make_variant, semantic_signature
from .vocab import SPECIALS, Vocabulary, build_vocab, tokenize
