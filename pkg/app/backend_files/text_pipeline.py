"""
Tokenization, lexicon-based part-of-speech tagging and keyword-span extraction.

A keyword is a maximal run of adjectives and nouns, with one immediately
preceding determiner attached ("a pillow", "A Russian Blue cat"). Each keyword
span is later collapsed into a single [$] position whose embedding row is
supplied by the projection module.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..utils.paths import LEXICON_PATH
from .errors import NoKeywordsError, ShapeMismatchError

PAD_ID, BOS_ID, EOS_ID, UNK_ID, SLOT_ID = range(5)
RESERVED_TOKENS = ("[PAD]", "[BOS]", "[EOS]", "[UNK]", "[$]")
SLOT_TOKEN = "[$]"

Span = Tuple[int, int]

# "[$]" survives as one word; everything else splits on non-word characters
_WORD_RE = re.compile(r"\[\$\]|[^\W_]+")


def split_words(text: str) -> List[str]:
    """Lowercase and split on whitespace/punctuation; punctuation is dropped"""
    return _WORD_RE.findall(text.lower())


# ==============================================
# Vocabulary
# ==============================================

class Vocabulary:
    """
    Token strings mapped to dense ids. Ids 0..4 are always
    [PAD], [BOS], [EOS], [UNK], [$]; the file format lists only the
    remaining tokens, one per line, id = line number + 5.
    """

    def __init__(self, tokens: Iterable[str] = ()):
        self._tokens: List[str] = list(RESERVED_TOKENS)
        self._ids: Dict[str, int] = {tok: i for i, tok in enumerate(RESERVED_TOKENS)}
        for token in tokens:
            if token not in self._ids:
                self._ids[token] = len(self._tokens)
                self._tokens.append(token)

    @classmethod
    def build(cls, texts: Iterable[str], extra_words: Iterable[str] = ()) -> "Vocabulary":
        """Vocabulary over every word in `texts` plus `extra_words`, sorted for reproducibility"""
        words = set(extra_words)
        for text in texts:
            words.update(split_words(text))
        words.difference_update(RESERVED_TOKENS)
        return cls(sorted(words))

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh if line.rstrip("\n"))

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for token in self._tokens[len(RESERVED_TOKENS):]:
                fh.write(token + "\n")

    def lookup(self, word: str) -> int:
        return self._ids.get(word, UNK_ID)

    def string(self, token_id: int) -> str:
        return self._tokens[token_id]

    def tokens(self) -> List[str]:
        return list(self._tokens)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, word: str) -> bool:
        return word in self._ids


# ==============================================
# Token sequences
# ==============================================

@dataclass(frozen=True)
class TokenSequence:
    """
    ids: token ids including [BOS] and [EOS]
    surface: the lowercased words behind ids[1:-1]
    keyword_spans: sorted, non-overlapping half-open ranges over ids
    """

    ids: Tuple[int, ...]
    surface: Tuple[str, ...]
    keyword_spans: Tuple[Span, ...] = ()

    def __post_init__(self):
        if len(self.ids) < 2 or self.ids[0] != BOS_ID or self.ids[-1] != EOS_ID:
            raise ShapeMismatchError("token sequence must start with [BOS] and end with [EOS]")
        last_end = 1
        for start, end in self.keyword_spans:
            if start < last_end or end <= start or end > len(self.ids) - 1:
                raise ShapeMismatchError(f"invalid keyword spans {self.keyword_spans}")
            last_end = end

    def __len__(self) -> int:
        return len(self.ids)

    def with_spans(self, spans: Sequence[Span]) -> "TokenSequence":
        return TokenSequence(self.ids, self.surface, tuple(sorted(spans)))

    def span_words(self) -> List[List[str]]:
        return [list(self.surface[s - 1:e - 1]) for s, e in self.keyword_spans]

    def collapse_spans(self) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
        """
        Replace every keyword span with one [$] id.

        Returns:
            (ids, slot_positions); positions of [$] tokens already present in
            the sequence (prompt templates) are slots too, in left-to-right order.
        """
        ids: List[int] = []
        slots: List[int] = []
        starts = {s: e for s, e in self.keyword_spans}
        i = 0
        while i < len(self.ids):
            if i in starts:
                slots.append(len(ids))
                ids.append(SLOT_ID)
                i = starts[i]
                continue
            if self.ids[i] == SLOT_ID:
                slots.append(len(ids))
            ids.append(self.ids[i])
            i += 1
        return tuple(ids), tuple(slots)

    def masked_text(self) -> str:
        """Surface form with every span shown as [$], e.g. "[$] sleeps on [$]" """
        words: List[str] = []
        starts = {s: e for s, e in self.keyword_spans}
        i = 1
        while i < len(self.ids) - 1:
            if i in starts:
                words.append(SLOT_TOKEN)
                i = starts[i]
            else:
                words.append(self.surface[i - 1])
                i += 1
        return " ".join(words)


def tokenize(caption: str, vocab: Vocabulary, max_seq_len: int) -> TokenSequence:
    """
    Lowercase, split, map unknown words to [UNK], wrap with [BOS]/[EOS].

    Word tokens (never [EOS]) are truncated so the sequence fits max_seq_len.
    """
    if max_seq_len < 2:
        raise ValueError("max_seq_len must leave room for [BOS] and [EOS]")
    words = split_words(caption)[:max_seq_len - 2]
    ids = (BOS_ID,) + tuple(vocab.lookup(w) for w in words) + (EOS_ID,)
    return TokenSequence(ids, tuple(words))


# ==============================================
# Part-of-speech lexicon
# ==============================================

class Tag(str, Enum):
    DET = "DET"
    ADJ = "ADJ"
    NOUN = "NOUN"
    VERB = "VERB"
    ADV = "ADV"
    ADP = "ADP"
    OTHER = "OTHER"


DEFAULT_SUFFIX_RULES = (
    ("ly", Tag.ADV),
    ("ing", Tag.VERB),
    ("ed", Tag.VERB),
    ("ous", Tag.ADJ),
    ("ful", Tag.ADJ),
    ("ish", Tag.ADJ),
)


@dataclass
class PosLexicon:
    """Exact-word table, then longest matching suffix rule, then the default tag"""

    words: Dict[str, Tag] = field(default_factory=dict)
    suffix_rules: List[Tuple[str, Tag]] = field(default_factory=lambda: list(DEFAULT_SUFFIX_RULES))
    default: Tag = Tag.NOUN

    def tag_word(self, word: str) -> Tag:
        if word == SLOT_TOKEN:
            return Tag.OTHER
        tag = self.words.get(word)
        if tag is not None:
            return tag
        best: Optional[Tuple[str, Tag]] = None
        for suffix, rule_tag in self.suffix_rules:
            if len(word) > len(suffix) and word.endswith(suffix):
                if best is None or len(suffix) > len(best[0]):
                    best = (suffix, rule_tag)
        return best[1] if best else self.default

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "PosLexicon":
        """
        Read `word<TAB>TAG` lines; lines after a `#suffix` header are
        `suffix<TAB>TAG` rules. Other lines starting with '#' are comments.
        """
        words: Dict[str, Tag] = {}
        rules: List[Tuple[str, Tag]] = []
        in_suffix = False
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    if line.lower().startswith("#suffix"):
                        in_suffix = True
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ValueError(f"{path}:{lineno}: expected 'word<TAB>TAG'")
                key, tag = parts[0].strip().lower(), Tag(parts[1].strip().upper())
                if in_suffix:
                    rules.append((key, tag))
                else:
                    words[key] = tag
        return cls(words=words, suffix_rules=rules or list(DEFAULT_SUFFIX_RULES))


@lru_cache(maxsize=1)
def get_default_lexicon() -> PosLexicon:
    """The shipped lexicon (loaded once per process)"""
    return PosLexicon.from_file(LEXICON_PATH)


def tag_pos(tokens: TokenSequence, lex: PosLexicon) -> List[Tag]:
    """One tag per surface word; [BOS]/[EOS] carry no tag"""
    return [lex.tag_word(word) for word in tokens.surface]


# ==============================================
# Keyword spans
# ==============================================

class MaskKind(str, Enum):
    ALL_KEYWORDS = "all-keywords"
    RANDOM_TOKEN = "random-token"
    ALL_NOUNS = "all-nouns"
    N_KEYWORDS = "n-keywords"
    NON_KEYWORDS = "non-keywords"


@dataclass(frozen=True)
class MaskPolicy:
    kind: MaskKind = MaskKind.ALL_KEYWORDS
    n: int = 0

    @classmethod
    def parse(cls, text: str) -> "MaskPolicy":
        """Accepts 'all-keywords', 'random-token', 'all-nouns', 'non-keywords', 'n-keywords:3' or '3-keywords'"""
        value = text.strip().lower().replace("_", "-")
        match = re.fullmatch(r"(?:n-keywords:(\d+)|(\d+)-keywords?)", value)
        if match:
            return cls(MaskKind.N_KEYWORDS, int(match.group(1) or match.group(2)))
        try:
            kind = MaskKind(value)
        except ValueError:
            raise ValueError(f"unknown mask policy '{text}'") from None
        if kind is MaskKind.N_KEYWORDS:
            raise ValueError("n-keywords needs a count, e.g. 'n-keywords:3'")
        return cls(kind)

    @property
    def is_random(self) -> bool:
        return self.kind in (MaskKind.RANDOM_TOKEN, MaskKind.N_KEYWORDS)

    @property
    def label(self) -> str:
        if self.kind is MaskKind.N_KEYWORDS:
            return f"{self.n}-keywords"
        return self.kind.value


def _runs(flags: Sequence[bool]) -> List[Span]:
    runs: List[Span] = []
    start = None
    for i, flag in enumerate(flags):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(flags)))
    return runs


def keyword_word_spans(tags: Sequence[Tag]) -> List[Span]:
    """Maximal ADJ/NOUN runs over word indices, each extended left by one adjacent DET"""
    spans = []
    for start, end in _runs([t in (Tag.ADJ, Tag.NOUN) for t in tags]):
        if start > 0 and tags[start - 1] is Tag.DET:
            start -= 1
        spans.append((start, end))
    return spans


def extract_keyword_spans(tokens: TokenSequence, tags: Sequence[Tag], policy: MaskPolicy = MaskPolicy(),
                          rng: Optional[np.random.Generator] = None) -> TokenSequence:
    """
    Record the spans selected by `policy` on `tokens`.

    Raises:
        NoKeywordsError: the policy selects nothing; callers skip the caption
    """
    if len(tags) != len(tokens.surface):
        raise ShapeMismatchError(f"{len(tags)} tags for {len(tokens.surface)} words")
    if policy.is_random and rng is None:
        rng = np.random.default_rng(0)

    content = [w != SLOT_TOKEN for w in tokens.surface]
    keywords = keyword_word_spans(tags)

    if policy.kind is MaskKind.ALL_KEYWORDS:
        spans = keywords
    elif policy.kind is MaskKind.ALL_NOUNS:
        spans = _runs([t is Tag.NOUN for t in tags])
    elif policy.kind is MaskKind.N_KEYWORDS:
        if policy.n < 1:
            raise ValueError("n-keywords policy needs n >= 1")
        count = min(policy.n, len(keywords))
        chosen = rng.choice(len(keywords), size=count, replace=False) if count else []
        spans = sorted(keywords[i] for i in chosen)
    elif policy.kind is MaskKind.RANDOM_TOKEN:
        candidates = [i for i, ok in enumerate(content) if ok]
        spans = [(c, c + 1) for c in rng.choice(candidates, size=1)] if candidates else []
    elif policy.kind is MaskKind.NON_KEYWORDS:
        covered = np.zeros(len(tags), dtype=bool)
        for start, end in keywords:
            covered[start:end] = True
        spans = _runs([ok and not cov for ok, cov in zip(content, covered)])
    else:
        raise ValueError(f"unsupported mask policy {policy}")

    spans = [(s, e) for s, e in spans if all(content[s:e])]
    if not spans:
        raise NoKeywordsError(f"no spans under policy '{policy.label}': {' '.join(tokens.surface)!r}")
    return tokens.with_spans([(int(s) + 1, int(e) + 1) for s, e in spans])
