"""Tokenization, attribute extraction and token-level span alignment."""

from __future__ import annotations

import json
import logging
import re
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ContractError, TruncationError

log = logging.getLogger(__name__)

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
CONTINUATION = "##"
ATTRIBUTE_TYPES = ("color", "material", "pattern", "transparency")

_WORD_RE = re.compile(r"\w+|[^\w\s]")


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace, keeping punctuation marks as words."""
    return _WORD_RE.findall(text.lower())


@dataclass
class Vocabulary:
    id_to_token: list[str]
    token_to_id: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.token_to_id:
            self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ContractError("vocabulary contains duplicate tokens")
        for special in (PAD, UNK, CLS, SEP):
            if special not in self.token_to_id:
                raise ContractError(f"vocabulary lacks special token {special}")

    @classmethod
    def build(cls, words: Iterable[str], pieces: Iterable[str] = ()) -> "Vocabulary":
        tokens = [PAD, UNK, CLS, SEP]
        for w in list(words) + list(pieces):
            w = w.lower()
            if w not in tokens:
                tokens.append(w)
        return cls(tokens)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def cls_id(self) -> int:
        return self.token_to_id[CLS]

    @property
    def sep_id(self) -> int:
        return self.token_to_id[SEP]

    def to_json(self) -> list[str]:
        return list(self.id_to_token)


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    surfaces: tuple[str, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.surfaces):
            raise ContractError("ids and surfaces differ in length")

    @property
    def length(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return len(self.ids)


def _wordpiece(vocab: Vocabulary, word: str) -> list[str] | None:
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while end > start:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION + piece
            if piece in vocab:
                found = piece
                break
            end -= 1
        if found is None:
            return None
        pieces.append(found)
        start = end
    return pieces


def tokenize(vocab: Vocabulary, text: str, max_len: int | None = None) -> TokenSeq:
    """Greedy longest-match subword tokenization.

    A word that cannot be fully covered by vocabulary pieces becomes a single
    unknown token whose surface keeps the original word.
    """
    ids: list[int] = []
    surfaces: list[str] = []
    for word in split_words(text):
        pieces = _wordpiece(vocab, word)
        if pieces is None:
            ids.append(vocab.unk_id)
            surfaces.append(word)
        else:
            ids.extend(vocab.token_to_id[p] for p in pieces)
            surfaces.extend(pieces)
    if max_len is not None and len(ids) > max_len:
        raise TruncationError(f"text has {len(ids)} tokens, maximum length is {max_len}")
    return TokenSeq(tuple(ids), tuple(surfaces))


# ---------------------------------------------------------------------------
# attribute extraction


DEFAULT_PROMPT = (
    "List every attribute word or phrase (color, material, pattern, transparency) "
    'in the following caption. Answer with JSON {{"attributes": [...]}}.\nCaption: {caption}'
)


@dataclass
class ExtractionConfig:
    mode: str = "lexicon"
    lexicon: dict[str, list[str]] = field(default_factory=dict)
    endpoint: str = ""
    prompt_template: str = DEFAULT_PROMPT
    timeout_ms: int = 5000
    retries: int = 2
    max_connections: int = 4

    def __post_init__(self):
        if self.mode not in ("lexicon", "remote"):
            raise ContractError(f"unknown extraction mode {self.mode!r}")
        if self.mode == "remote" and not self.endpoint:
            raise ContractError("remote extraction requires a non-empty endpoint")

    def phrases(self) -> list[str]:
        out = []
        for kind in sorted(self.lexicon):
            for p in self.lexicon[kind]:
                if p.lower() not in out:
                    out.append(p.lower())
        return out


def load_lexicon(path: str | Path) -> dict[str, list[str]]:
    """Read a lexicon file: a JSON object mapping attribute type to a phrase list."""
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict) or not all(isinstance(v, list) for v in doc.values()):
        raise ContractError(f"{path}: lexicon must map attribute types to phrase lists")
    return {str(k): [str(p) for p in v] for k, v in doc.items()}


def save_lexicon(path: str | Path, lexicon: dict[str, list[str]]) -> None:
    Path(path).write_text(json.dumps(lexicon, indent=2, sort_keys=True) + "\n")


def _scan(words: Sequence[str], phrases: Iterable[str]) -> list[tuple[int, int, str]]:
    """Leftmost, longest, non-overlapping whole-word phrase hits as (start, n_words, phrase)."""
    by_words = sorted({tuple(split_words(p)) for p in phrases if split_words(p)}, key=len, reverse=True)
    hits = []
    i = 0
    while i < len(words):
        for pw in by_words:
            if tuple(words[i : i + len(pw)]) == pw:
                hits.append((i, len(pw), " ".join(pw)))
                i += len(pw)
                break
        else:
            i += 1
    return hits


def extract_attributes_lexicon(cfg: ExtractionConfig, text: str) -> list[str]:
    """Lexicon phrases found in ``text``, in caption order, each reported once."""
    out: list[str] = []
    for _, _, phrase in _scan(split_words(text), cfg.phrases()):
        if phrase not in out:
            out.append(phrase)
    return out


@dataclass
class Extraction:
    phrases: list[str]
    fallback: bool = False
    dropped: list[str] = field(default_factory=list)


_semaphores: dict[str, threading.BoundedSemaphore] = {}
_sem_lock = threading.Lock()


def _endpoint_slot(cfg: ExtractionConfig) -> threading.BoundedSemaphore:
    with _sem_lock:
        if cfg.endpoint not in _semaphores:
            _semaphores[cfg.endpoint] = threading.BoundedSemaphore(max(1, cfg.max_connections))
        return _semaphores[cfg.endpoint]


def _occurs(words: Sequence[str], phrase: str) -> bool:
    pw = tuple(split_words(phrase))
    if not pw:
        return False
    return any(tuple(words[i : i + len(pw)]) == pw for i in range(len(words) - len(pw) + 1))


def _request(cfg: ExtractionConfig, text: str) -> list[str]:
    body = json.dumps({"prompt": cfg.prompt_template.format(caption=text), "caption": text}).encode()
    req = urllib.request.Request(cfg.endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST")
    with _endpoint_slot(cfg):
        with urllib.request.urlopen(req, timeout=cfg.timeout_ms / 1000.0) as resp:
            if resp.status != 200:
                raise ValueError(f"status {resp.status}")
            doc = json.loads(resp.read().decode())
    attrs = doc["attributes"]
    if not isinstance(attrs, list) or not all(isinstance(a, str) for a in attrs):
        raise ValueError("'attributes' must be a list of strings")
    return attrs


def extract_attributes_remote(cfg: ExtractionConfig, text: str) -> Extraction:
    """Ask the completion endpoint for attribute phrases, validating them against ``text``.

    Network errors, timeouts, non-200 replies and malformed bodies fall back to
    the lexicon extractor after ``cfg.retries`` retries.
    """
    if cfg.mode != "remote":
        raise ContractError("extract_attributes_remote requires mode='remote'")
    last_error: Exception | None = None
    for _ in range(cfg.retries + 1):
        try:
            returned = _request(cfg, text)
            break
        except (urllib.error.URLError, OSError, ValueError, KeyError, TypeError) as exc:
            last_error = exc
    else:
        log.warning("remote extraction failed (%s); using lexicon for %r", last_error, text)
        return Extraction(extract_attributes_lexicon(cfg, text), fallback=True)

    words = split_words(text)
    kept: list[str] = []
    dropped: list[str] = []
    for phrase in returned:
        norm = " ".join(split_words(phrase))
        if norm and _occurs(words, norm):
            if norm not in kept:
                kept.append(norm)
        else:
            dropped.append(phrase)
    if dropped:
        log.warning("dropped %d phrase(s) absent from caption %r: %s", len(dropped), text, dropped)
    return Extraction(kept, fallback=False, dropped=dropped)


def extract_attributes(cfg: ExtractionConfig, text: str) -> Extraction:
    if cfg.mode == "remote":
        return extract_attributes_remote(cfg, text)
    return Extraction(extract_attributes_lexicon(cfg, text))


# ---------------------------------------------------------------------------
# span alignment


@dataclass(frozen=True)
class Span:
    phrase: str
    indices: tuple[int, ...]  # 1-based caption token positions, contiguous


@dataclass(frozen=True)
class AttributeSpanSet:
    spans: tuple[Span, ...] = ()
    unmatched: tuple[str, ...] = ()

    @property
    def attr_indices(self) -> tuple[int, ...]:
        return tuple(sorted(i for s in self.spans for i in s.indices))

    @property
    def k(self) -> int:
        return len(self.attr_indices)

    def __bool__(self) -> bool:
        return bool(self.spans)

    def validate(self, length: int) -> None:
        seen: set[int] = set()
        for s in self.spans:
            if not s.indices:
                raise ContractError(f"empty span for {s.phrase!r}")
            for i in s.indices:
                if not 1 <= i <= length:
                    raise ContractError(f"span index {i} outside [1, {length}]")
                if i in seen:
                    raise ContractError(f"overlapping spans at index {i}")
                seen.add(i)


def match_spans(vocab: Vocabulary, caption: TokenSeq, phrases: Sequence[str]) -> AttributeSpanSet:
    """Locate every occurrence of each phrase as a contiguous token run of ``caption``.

    Overlaps between candidates are resolved by earliest start, then longest
    run, then the phrase listed first.
    """
    if not phrases:
        return AttributeSpanSet()
    unique: list[str] = []
    for p in phrases:
        if p not in unique:
            unique.append(p)
    surfaces = caption.surfaces
    candidates = []
    found = set()
    for order, phrase in enumerate(unique):
        target = tokenize(vocab, phrase).surfaces
        n = len(target)
        if n == 0:
            continue
        for start in range(len(surfaces) - n + 1):
            if surfaces[start : start + n] == target:
                candidates.append((start, -n, order, phrase))
                found.add(phrase)
    candidates.sort()
    taken: set[int] = set()
    spans = []
    for start, neg_n, _, phrase in candidates:
        idx = range(start, start - neg_n)
        if taken.intersection(idx):
            continue
        taken.update(idx)
        spans.append(Span(phrase, tuple(i + 1 for i in idx)))
    spans.sort(key=lambda s: s.indices[0])
    unmatched = tuple(p for p in unique if p not in found)
    return AttributeSpanSet(tuple(spans), unmatched)
