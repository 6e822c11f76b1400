"""Deterministic noun-phrase chunker for short scene prompts.

Grammar: NP := DET? ADJ* NOUN (PP)?, with phrases separated by "and", "or"
or commas.  Inside a chunk the last token before any preposition is the head
noun and the tokens before it are adjectives.  A prepositional phrase stays
attached to the phrase it follows.
"""
from __future__ import annotations

import string
from dataclasses import dataclass
from typing import List, Tuple

from sklearn.base import BaseEstimator, TransformerMixin

DETERMINERS = frozenset(
    "a an the this that these those some any each every its his her their my your our "
    "one two three".split()
)
CONJUNCTIONS = frozenset({"and", "or", "&"})
PREPOSITIONS = frozenset(
    "on in with of under beside behind near at over above below by from inside "
    "outside onto into atop beneath between next".split()
)

_PUNCT = string.punctuation


class PromptParseError(ValueError):
    pass


def tokenize(prompt: str) -> List[str]:
    """Whitespace tokens, lowercased, with surrounding punctuation removed.

    Token positions match the word rows served by embedding providers.
    """
    return [tok.strip(_PUNCT).lower() for tok in prompt.split()]


@dataclass(frozen=True)
class NounPhrase:
    adjectives: Tuple[str, ...]
    head_noun: str
    span: Tuple[int, int]
    phrase_id: int
    attachment: Tuple[str, ...] = ()

    @property
    def word_indices(self) -> range:
        """Prompt word positions belonging to this phrase (span is inclusive)."""
        return range(self.span[0], self.span[1] + 1)

    @property
    def n_words(self) -> int:
        return self.span[1] - self.span[0] + 1

    @property
    def text(self) -> str:
        return " ".join(self.adjectives + (self.head_noun,) + self.attachment)

    def as_tuple(self):
        return list(self.adjectives), self.head_noun


def _chunks(prompt: str):
    chunk = []
    for i, raw in enumerate(prompt.split()):
        word = raw.strip(_PUNCT).lower()
        if word in CONJUNCTIONS or raw in CONJUNCTIONS:
            if chunk:
                yield chunk
            chunk = []
            continue
        if word:
            chunk.append((i, word))
        if raw.rstrip().endswith((",", ";")) and chunk:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


def extract_noun_phrases(prompt: str) -> List[NounPhrase]:
    if not prompt or not prompt.strip():
        raise PromptParseError("empty prompt")
    phrases: List[NounPhrase] = []
    for chunk in _chunks(prompt):
        while chunk and chunk[0][1] in DETERMINERS:
            chunk = chunk[1:]
        if not chunk:
            continue
        cut = next((k for k, (_, w) in enumerate(chunk) if k > 0 and w in PREPOSITIONS), len(chunk))
        core, tail = chunk[:cut], chunk[cut:]
        words = [w for _, w in core]
        phrases.append(NounPhrase(
            adjectives=tuple(words[:-1]),
            head_noun=words[-1],
            span=(core[0][0], chunk[-1][0]),
            phrase_id=len(phrases),
            attachment=tuple(w for _, w in tail),
        ))
    if not phrases:
        raise PromptParseError(f"no noun phrase found in {prompt!r}")
    return phrases


class NounPhraseChunker(TransformerMixin, BaseEstimator):
    """Transformer mapping prompts to their noun-phrase lists."""

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        if isinstance(X, str):
            X = [X]
        return [extract_noun_phrases(p) for p in X]
