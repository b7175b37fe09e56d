"""Rule-based shallow noun-phrase chunker.

A lexicon-driven coarse tagger (closed-class word lists, a domain noun
lexicon, and a couple of suffix heuristics) feeds a longest-match-first
pattern chunker over the tag sequence. Stands in for a full NLP parser on
the small caption vocabulary this project works with.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .prompts import Phrase

DETERMINERS = {
    "a", "an", "the", "this", "that", "these", "those", "some",
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
}

ADJECTIVES = {
    # colors
    "red", "green", "blue", "yellow", "purple", "orange", "cyan", "magenta",
    "pink", "brown", "gray", "grey", "black", "white", "dark", "light", "pale",
    "bright", "turquoise",
    # size / form attributes
    "big", "small", "large", "tiny", "little", "huge", "wide", "narrow",
    "flat", "round", "stretched", "hollow", "solid", "outlined", "filled",
    "thin", "thick", "tall", "short",
}

NOUNS = {
    "circle", "square", "triangle", "ellipse", "rectangle", "ring", "diamond",
    "star", "cross", "dot", "blob", "disk", "disc", "oval", "box", "pentagon",
    "hexagon", "shape", "object", "thing", "item", "figure",
}

_WORD_RE = re.compile(r"[A-Za-z0-9]+")


def tag_word(word: str) -> str:
    """Coarse POS tag: D (determiner), A (adjective), N (noun), O (other)."""
    w = word.lower()
    if w in DETERMINERS:
        return "D"
    if w in ADJECTIVES:
        return "A"
    if w in NOUNS:
        return "N"
    # suffix heuristics: known-noun plurals, '-ish' attribute coinages
    if w.endswith("es") and w[:-2] in NOUNS:
        return "N"
    if w.endswith("s") and w[:-1] in NOUNS:
        return "N"
    if w.endswith("ish") and len(w) > 4:
        return "A"
    return "O"


@dataclass(frozen=True)
class ChunkerRule:
    """Ordered tag patterns; the first (and longest) match at a position wins."""

    patterns: tuple[str, ...] = ("D?A*N+",)

    def __post_init__(self) -> None:
        if not self.patterns:
            raise ValueError("pattern list must be non-empty")

    def compiled(self) -> list[re.Pattern[str]]:
        return [re.compile(p) for p in self.patterns]


DEFAULT_RULE = ChunkerRule()


def extract_noun_phrases(caption: str, rule: ChunkerRule = DEFAULT_RULE) -> list[Phrase]:
    """Non-overlapping noun phrases, left to right, longest match first.

    Returns phrases with half-open char spans into the caption; an empty list
    when nothing matches.
    """
    if not caption:
        raise ValueError("caption must be non-empty")
    words = [(m.group(0), m.start(), m.end()) for m in _WORD_RE.finditer(caption)]
    tags = "".join(tag_word(w) for w, _, _ in words)
    patterns = rule.compiled()

    phrases: list[Phrase] = []
    pos = 0
    while pos < len(tags):
        best: re.Match[str] | None = None
        for pat in patterns:
            m = pat.match(tags, pos)
            if m and m.end() > m.start():
                best = m
                break
        if best is None:
            pos += 1
            continue
        start_char = words[best.start()][1]
        end_char = words[best.end() - 1][2]
        phrases.append(Phrase(text=caption[start_char:end_char], char_span=(start_char, end_char)))
        pos = best.end()
    return phrases
