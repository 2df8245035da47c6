"""Text normalization helpers shared across curation, probing, and scoring.

Two normalizations coexist on purpose: answer handling collapses case and
whitespace only, while match scoring additionally strips punctuation hanging
off the ends of the string.
"""

from __future__ import annotations

import string

_PUNCT = set(string.punctuation)
_STRIP_CHARS = string.punctuation + string.whitespace


def collapse_norm(text: str) -> str:
    """Lowercase and collapse runs of whitespace to single spaces."""
    return " ".join(text.lower().split())


def match_norm(text: str) -> str:
    """collapse_norm plus stripping punctuation from both ends of the string."""
    return collapse_norm(text).strip(_STRIP_CHARS)


def is_punct_only(token: str) -> bool:
    return bool(token) and all(ch in _PUNCT for ch in token)


def metric_tokens(text: str) -> list[str]:
    """Lowercased whitespace tokens with punctuation-only tokens dropped.

    Used by the overlap metrics (avg_match, rouge_l) so that a trailing
    " ." token never counts as content.
    """
    return [tok for tok in text.lower().split() if not is_punct_only(tok)]


def contains_contiguous(needle: list[str], haystack: list[str]) -> bool:
    """True when needle appears as a contiguous slice of haystack."""
    if not needle:
        return True
    n = len(needle)
    return any(haystack[i : i + n] == needle for i in range(len(haystack) - n + 1))


def truncate_tokens(text: str, max_tokens: int) -> str:
    """Keep at most max_tokens whitespace tokens, rejoined by single spaces."""
    return " ".join(text.split()[:max_tokens])
