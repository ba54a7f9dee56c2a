"""Pluggable tokenizers used for caption token-length accounting.

Average-token-length statistics depend on which tokenizer you count with, so
the tokenizer is a configured component rather than a hard-coded choice. Two
implementations ship here:

* ``whitespace`` — splits on runs of whitespace; the default.
* ``vocab:<path>`` — greedy longest-match against a newline-separated
  vocabulary file, as a stand-in for an LLM's BPE vocabulary. Characters not
  covered by any vocab entry count as one token each.
"""

from __future__ import annotations

from typing import Protocol

from .errors import ConfigError


class Tokenizer(Protocol):
    tokenizer_id: str

    def count(self, text: str) -> int: ...


class WhitespaceTokenizer:
    tokenizer_id = "whitespace"

    def count(self, text: str) -> int:
        return len(text.split())


class VocabTokenizer:
    """Greedy longest-match tokenizer over a fixed vocabulary file."""

    def __init__(self, vocab_path: str):
        with open(vocab_path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        if not tokens:
            raise ConfigError(f"empty vocabulary file: {vocab_path}")
        self.tokenizer_id = f"vocab:{vocab_path}"
        self._vocab = set(tokens)
        self._max_len = max(len(t) for t in tokens)

    def count(self, text: str) -> int:
        n = 0
        i = 0
        while i < len(text):
            for width in range(min(self._max_len, len(text) - i), 0, -1):
                if text[i:i + width] in self._vocab:
                    i += width
                    break
            else:
                i += 1
            n += 1
        return n


def get_tokenizer(tokenizer_id: str) -> Tokenizer:
    """Resolve a tokenizer id from config ("whitespace" or "vocab:<path>")."""
    if tokenizer_id == "whitespace":
        return WhitespaceTokenizer()
    if tokenizer_id.startswith("vocab:"):
        return VocabTokenizer(tokenizer_id[len("vocab:"):])
    raise ConfigError(f"unknown tokenizer id: {tokenizer_id!r}")
