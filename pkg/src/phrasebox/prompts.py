"""Prompt construction and tokenization.

Detection prompts are class names joined by a separator ("person. bicycle. ");
grounding prompts are free captions with known phrase spans. Both are tokenized
by a deterministic fixed-piece sub-word tokenizer and carry an exact
phrase -> token-span map plus a terminal no-object token.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CapTooSmall, PoolTooSmall, TooManyTokens

PAD_ID = 0
NOOBJ_ID = 1
NUM_RESERVED_IDS = 2
NOOBJ_STRING = "[NoObj]"

# words and single punctuation marks; whitespace is never a token
_WORD_RE = re.compile(r"[A-Za-z0-9]+|[^\sA-Za-z0-9]")


@dataclass(frozen=True)
class PromptConfig:
    separator: str = ". "
    max_tokens: int = 256
    subword_piece_len: int = 6
    chunk_size: int = 40
    downsample_cap: int = 85
    hash_vocab_size: int = 4094  # content ids live in [2, 2 + hash_vocab_size)

    def __post_init__(self) -> None:
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.downsample_cap < 1:
            raise ValueError("downsample_cap must be >= 1")
        if self.max_tokens < 4:
            raise ValueError("max_tokens must be >= 4")

    @property
    def vocab_size(self) -> int:
        return NUM_RESERVED_IDS + self.hash_vocab_size


@dataclass(frozen=True)
class Phrase:
    """A groundable span of the prompt text."""

    text: str
    char_span: tuple[int, int]

    def __post_init__(self) -> None:
        start, end = self.char_span
        if not 0 <= start < end:
            raise ValueError(f"bad char_span {self.char_span}")


@dataclass(frozen=True)
class TokenizedPrompt:
    """A prompt with token ids, per-token char spans, and phrase ownership.

    The last token is always the no-object token; `special_mask` is true there
    and at separator/punctuation tokens that belong to no phrase.
    """

    text: str
    token_ids: tuple[int, ...]
    token_strings: tuple[str, ...]
    token_spans: tuple[tuple[int, int], ...]
    phrases: tuple[Phrase, ...]
    phrase_token_spans: tuple[tuple[int, ...], ...]
    special_mask: tuple[bool, ...]

    @property
    def num_tokens(self) -> int:
        return len(self.token_ids)

    @property
    def num_phrases(self) -> int:
        return len(self.phrases)

    @property
    def noobj_index(self) -> int:
        return len(self.token_ids) - 1

    def token_to_phrase(self) -> list[int]:
        """Per-token owning phrase index, -1 where unowned."""
        owner = [-1] * self.num_tokens
        for p, span in enumerate(self.phrase_token_spans):
            for t in span:
                owner[t] = p
        return owner

    def validate(self) -> None:
        m, c = self.num_tokens, self.num_phrases
        if m < c:
            raise ValueError("token count below phrase count")
        if self.token_ids[-1] != NOOBJ_ID or not self.special_mask[-1]:
            raise ValueError("prompt must end with the no-object token")
        seen: set[int] = set()
        for phrase, span in zip(self.phrases, self.phrase_token_spans):
            if not span:
                raise ValueError(f"phrase {phrase.text!r} owns no tokens")
            if list(span) != sorted(span):
                raise ValueError("phrase token indices must ascend")
            for t in span:
                if t in seen:
                    raise ValueError("phrase token spans overlap")
                if self.special_mask[t]:
                    raise ValueError("phrase span includes a special token")
                seen.add(t)
            s, e = phrase.char_span
            if self.text[s:e] != phrase.text:
                raise ValueError("phrase text does not match prompt slice")


def hash_token_id(token: str, config: PromptConfig) -> int:
    """Stable content-token id from a keyed hash of the surface string."""
    digest = hashlib.blake2s(token.encode("utf-8"), digest_size=8).digest()
    return NUM_RESERVED_IDS + int.from_bytes(digest, "big") % config.hash_vocab_size


def tokenize(text: str, config: PromptConfig) -> tuple[list[str], list[tuple[int, int]]]:
    """Split text into word/punctuation tokens with fixed-length sub-word pieces.

    Words longer than `subword_piece_len` are cut into consecutive pieces of at
    most that many characters; pieces after the first are marked with a leading
    '#'. Char spans exactly tile each word, so the original word sequence is
    recoverable from the spans (or from the strings modulo the '#' marker).
    """
    if not text:
        raise ValueError("cannot tokenize empty text")
    piece_len = config.subword_piece_len
    tokens: list[str] = []
    spans: list[tuple[int, int]] = []
    for match in _WORD_RE.finditer(text):
        word, start = match.group(0), match.start()
        for offset in range(0, len(word), piece_len):
            piece = word[offset : offset + piece_len]
            tokens.append(piece if offset == 0 else "#" + piece)
            spans.append((start + offset, start + offset + len(piece)))
    return tokens, spans


def detokenize(tokens: Sequence[str]) -> list[str]:
    """Rebuild the word sequence from token strings (inverse of `tokenize`)."""
    words: list[str] = []
    for tok in tokens:
        if tok.startswith("#") and words:
            words[-1] += tok[1:]
        else:
            words.append(tok)
    return words


def _assemble(text: str, phrases: Sequence[Phrase], config: PromptConfig) -> TokenizedPrompt:
    token_strings, token_spans = tokenize(text, config)
    phrase_token_spans: list[list[int]] = [[] for _ in phrases]
    owned = [False] * len(token_strings)
    for p, phrase in enumerate(phrases):
        ps, pe = phrase.char_span
        for t, (ts, te) in enumerate(token_spans):
            if ts >= ps and te <= pe:
                phrase_token_spans[p].append(t)
                owned[t] = True
            elif ts < pe and te > ps:
                raise ValueError(f"token {token_strings[t]!r} straddles phrase {phrase.text!r}")
    for p, phrase in enumerate(phrases):
        if not phrase_token_spans[p]:
            raise ValueError(f"phrase {phrase.text!r} owns no tokens")

    token_ids = [hash_token_id(t, config) for t in token_strings]
    # unowned punctuation (separators) is special; unowned words are plain
    # added tokens that act as negatives
    special = [
        (not owned[t]) and not token_strings[t].lstrip("#").isalnum()
        for t in range(len(token_strings))
    ]

    token_strings.append(NOOBJ_STRING)
    token_spans.append((len(text), len(text)))
    token_ids.append(NOOBJ_ID)
    special.append(True)

    if len(token_ids) > config.max_tokens:
        raise TooManyTokens(
            f"prompt needs {len(token_ids)} tokens, limit is {config.max_tokens}"
        )
    prompt = TokenizedPrompt(
        text=text,
        token_ids=tuple(token_ids),
        token_strings=tuple(token_strings),
        token_spans=tuple(token_spans),
        phrases=tuple(phrases),
        phrase_token_spans=tuple(tuple(s) for s in phrase_token_spans),
        special_mask=tuple(special),
    )
    prompt.validate()
    return prompt


def build_detection_prompt(
    class_names: Sequence[str], config: PromptConfig | None = None
) -> TokenizedPrompt:
    """Join class names into a detection prompt, one phrase per class.

    Text is ``"name. name. "`` style: every name followed by the separator,
    including the last.
    """
    config = config or PromptConfig()
    if not class_names:
        raise ValueError("class_names must be non-empty")
    if len(set(class_names)) != len(class_names):
        raise ValueError("class_names contains duplicates")
    if any(not name for name in class_names):
        raise ValueError("class_names contains an empty name")

    pieces: list[str] = []
    phrases: list[Phrase] = []
    cursor = 0
    for name in class_names:
        phrases.append(Phrase(text=name, char_span=(cursor, cursor + len(name))))
        pieces.append(name + config.separator)
        cursor += len(name) + len(config.separator)
    return _assemble("".join(pieces), phrases, config)


def build_grounding_prompt(
    caption: str,
    phrase_spans: Sequence[tuple[int, int]],
    config: PromptConfig | None = None,
) -> TokenizedPrompt:
    """Tokenize a caption whose groundable phrase char-spans are already known."""
    config = config or PromptConfig()
    phrases = [Phrase(text=caption[s:e], char_span=(s, e)) for s, e in phrase_spans]
    return _assemble(caption, phrases, config)


def chunk_vocabulary(
    class_names: Sequence[str], config: PromptConfig | None = None
) -> list[TokenizedPrompt]:
    """Split a large vocabulary into consecutive prompts of <= chunk_size classes."""
    config = config or PromptConfig()
    if not class_names:
        raise ValueError("class_names must be non-empty")
    return [
        build_detection_prompt(class_names[i : i + config.chunk_size], config)
        for i in range(0, len(class_names), config.chunk_size)
    ]


def chunk_class_lists(class_names: Sequence[str], chunk_size: int) -> list[list[str]]:
    """The class-name slices behind `chunk_vocabulary`, for index bookkeeping."""
    return [list(class_names[i : i + chunk_size]) for i in range(0, len(class_names), chunk_size)]


def downsample_categories(
    positives: Sequence[str],
    negatives: Sequence[str],
    cap: int,
    rng: np.random.Generator,
) -> list[str]:
    """Randomly pad the positive classes with negatives and shuffle the order.

    With probability 0.5 the prompt is filled up to `cap` names; otherwise a
    uniform count in [1, cap - |positives|] of negatives is added. Output always
    contains every positive and never exceeds `cap` names.
    """
    pos = sorted(set(positives))
    neg = sorted(set(negatives) - set(pos))
    if len(pos) > cap:
        raise CapTooSmall(f"{len(pos)} positives exceed cap {cap}")
    room = cap - len(pos)
    if room == 0 or not neg:
        n_extra = 0
    elif rng.random() < 0.5:
        n_extra = room
    else:
        n_extra = int(rng.integers(1, room + 1))
    n_extra = min(n_extra, len(neg))
    chosen = list(rng.choice(len(neg), size=n_extra, replace=False)) if n_extra else []
    names = pos + [neg[i] for i in chosen]
    rng.shuffle(names)
    return names


def mix_negative_captions(
    positive: str,
    pool: Sequence[str],
    rng: np.random.Generator,
    separator: str = ". ",
) -> tuple[str, tuple[int, int]]:
    """Concatenate the positive caption with sampled negative captions.

    With probability 0.3 mixes in 19 negatives, with probability 0.3 a uniform
    count in [1, 19]; otherwise the caption is returned alone. The positive
    caption's position among the concatenated captions is random; the returned
    char-span locates it so phrase spans can be shifted.
    """
    draw = rng.random()
    if draw < 0.3:
        n_neg = 19
    elif draw < 0.6:
        n_neg = int(rng.integers(1, 20))
    else:
        n_neg = 0
    if n_neg == 0:
        return positive, (0, len(positive))
    if n_neg > len(pool):
        raise PoolTooSmall(f"need {n_neg} negative captions, pool has {len(pool)}")
    chosen = rng.choice(len(pool), size=n_neg, replace=False)
    captions = [pool[i] for i in chosen]
    slot = int(rng.integers(0, n_neg + 1))
    captions.insert(slot, positive)
    text = separator.join(captions)
    start = sum(len(c) + len(separator) for c in captions[:slot])
    return text, (start, start + len(positive))
