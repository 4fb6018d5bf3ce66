"""Byte-fallback BPE with special tokens and interruption-token (IDIT) encoding.

Ids ``0..255`` are the raw bytes, the special tokens follow, and learned
merges take the remaining ids in merge order. Special tokens are only ever
emitted structurally; their literal text inside user input is tokenized as
ordinary bytes.
"""

from __future__ import annotations

import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, INTERRUPT = "<|pad|>", "<|bos|>", "<|eos|>", "<|I|>"
SPECIALS = (PAD, BOS, EOS, INTERRUPT)
N_BYTES = 256

CJK_FIRST, CJK_LAST = 0x4E00, 0x9FFF

_PRETOKEN = re.compile(r" ?[^\W\d_]+| ?\d+| ?[^\s\w]+| ?_+|\s+(?!\S)|\s+|.", re.S)
_EN_CHARS = frozenset("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ'")


class TokenizerError(ValueError):
    pass


class TextEncodingError(TokenizerError):
    pass


class TrainingError(TokenizerError):
    pass


class VocabularyError(TokenizerError):
    pass


# ---------------------------------------------------------------------------
# text normalisation and unit segmentation
# ---------------------------------------------------------------------------


def normalize(raw: str | bytes) -> str:
    """Collapse whitespace runs to one space and strip the ends. Case is kept."""
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TextEncodingError(f"invalid UTF-8: {exc}") from None
    else:
        try:
            raw.encode("utf-8")
        except UnicodeEncodeError as exc:
            raise TextEncodingError(f"text is not encodable as UTF-8: {exc}") from None
    return " ".join(raw.split())


def is_cjk(ch: str) -> bool:
    return CJK_FIRST <= ord(ch) <= CJK_LAST


def char_class(ch: str) -> str:
    if is_cjk(ch):
        return "zh"
    if ch in _EN_CHARS:
        return "en"
    if ch.isspace():
        return "space"
    return "other"


@dataclass(frozen=True)
class Unit:
    text: str
    lang: str  # zh | en | other
    preceded_by_space: bool = False

    @property
    def surface(self) -> str:
        """The unit as it is tokenized: text with its leading separator."""
        return " " + self.text if self.preceded_by_space else self.text


def segment_units(text: str) -> list[Unit]:
    """Split normalized text into Chinese characters, English words and symbol runs."""
    units: list[Unit] = []
    spaced = False
    i, n = 0, len(text)
    while i < n:
        cls = char_class(text[i])
        if cls == "space":
            spaced = True
            i += 1
            continue
        if cls == "zh":
            j = i + 1
        else:
            j = i + 1
            while j < n and char_class(text[j]) == cls:
                j += 1
        units.append(Unit(text[i:j], cls, spaced))
        spaced = False
        i = j
    return units


def join_units(units: Sequence[Unit]) -> str:
    return "".join(u.surface for u in units).lstrip(" ")


def pretokenize(text: str) -> list[str]:
    return _PRETOKEN.findall(text)


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


@dataclass
class Vocab:
    merges: list[tuple[bytes, bytes]]
    specials: tuple[str, ...] = SPECIALS
    _cache: dict[str, tuple[int, ...]] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.id_to_bytes: list[bytes] = [bytes([b]) for b in range(N_BYTES)]
        self.id_to_bytes += [s.encode("utf-8") for s in self.specials]
        self.bytes_to_id: dict[bytes, int] = {bytes([b]): b for b in range(N_BYTES)}
        self.special_ids = {s: N_BYTES + k for k, s in enumerate(self.specials)}
        self.merge_rank: dict[tuple[bytes, bytes], int] = {}
        for rank, (a, b) in enumerate(self.merges):
            merged = a + b
            if a not in self.bytes_to_id or b not in self.bytes_to_id:
                raise VocabularyError(f"merge {rank} uses an unknown token")
            if merged in self.bytes_to_id:
                raise VocabularyError(f"merge {rank} duplicates an existing token")
            self.merge_rank[(a, b)] = rank
            self.bytes_to_id[merged] = len(self.id_to_bytes)
            self.id_to_bytes.append(merged)

    def __len__(self) -> int:
        return len(self.id_to_bytes)

    @property
    def pad_id(self) -> int:
        return self.special_ids[PAD]

    @property
    def bos_id(self) -> int:
        return self.special_ids[BOS]

    @property
    def eos_id(self) -> int:
        return self.special_ids[EOS]

    @property
    def interrupt_id(self) -> int:
        return self.special_ids[INTERRUPT]

    def piece(self, token_id: int) -> bytes:
        if not 0 <= token_id < len(self.id_to_bytes):
            raise VocabularyError(f"unknown token id {token_id}")
        return self.id_to_bytes[token_id]

    def _bpe(self, word: str) -> tuple[int, ...]:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        parts = [bytes([b]) for b in word.encode("utf-8")]
        while len(parts) > 1:
            best, best_rank = -1, None
            for k in range(len(parts) - 1):
                r = self.merge_rank.get((parts[k], parts[k + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = k, r
            if best_rank is None:
                break
            a, b = self.merges[best_rank]
            merged, k, out = a + b, 0, []
            while k < len(parts):
                if k < len(parts) - 1 and parts[k] == a and parts[k + 1] == b:
                    out.append(merged)
                    k += 2
                else:
                    out.append(parts[k])
                    k += 1
            parts = out
        ids = tuple(self.bytes_to_id[p] for p in parts)
        self._cache[word] = ids
        return ids

    # -- persistence --------------------------------------------------------
    def dumps(self) -> str:
        lines = ["#csmoe-vocab 1"]
        for s in self.specials:
            lines.append(f"special {self.special_ids[s]} {s.encode('utf-8').hex()}")
        for a, b in self.merges:
            lines.append(f"merge {a.hex()} {b.hex()}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> Vocab:
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#csmoe-vocab"):
            raise VocabularyError("missing vocab header")
        specials: list[tuple[int, str]] = []
        merges = []
        for line in lines[1:]:
            if not line.strip():
                continue
            kind, *rest = line.split()
            if kind == "special":
                specials.append((int(rest[0]), bytes.fromhex(rest[1]).decode("utf-8")))
            elif kind == "merge":
                merges.append((bytes.fromhex(rest[0]), bytes.fromhex(rest[1])))
            else:
                raise VocabularyError(f"unknown vocab line kind {kind!r}")
        specials.sort()
        if [i for i, _ in specials] != list(range(N_BYTES, N_BYTES + len(specials))):
            raise VocabularyError("special ids must directly follow the byte table")
        return cls(merges, tuple(s for _, s in specials))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> Vocab:
        return cls.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train_bpe(corpus: Iterable[str], target_vocab: int, specials: Sequence[str] = SPECIALS) -> Vocab:
    """Greedy BPE: merge the most frequent adjacent pair until ``target_vocab`` ids exist.

    Ties go to the byte-wise smallest pair. Merges that would spell a special
    token are skipped.
    """
    specials = tuple(specials)
    floor = N_BYTES + len(specials)
    if target_vocab < floor:
        raise TrainingError(f"target_vocab must be >= {floor}")
    counts: Counter[str] = Counter()
    for line in corpus:
        counts.update(pretokenize(normalize(line)))
    if not counts:
        raise TrainingError("empty corpus")
    forbidden = {s.encode("utf-8") for s in specials}

    words = [[bytes([b]) for b in w.encode("utf-8")] for w in counts]
    freqs = list(counts.values())
    pair_counts: Counter[tuple[bytes, bytes]] = Counter()
    where: dict[tuple[bytes, bytes], set[int]] = defaultdict(set)
    for wi, parts in enumerate(words):
        for pair in zip(parts, parts[1:]):
            pair_counts[pair] += freqs[wi]
            where[pair].add(wi)

    merges: list[tuple[bytes, bytes]] = []
    known = {bytes([b]) for b in range(N_BYTES)}
    while floor + len(merges) < target_vocab:
        candidates = [
            (-c, p) for p, c in pair_counts.items() if c > 0 and p[0] + p[1] not in forbidden and p[0] + p[1] not in known
        ]
        if not candidates:
            break
        _, best = min(candidates)
        merges.append(best)
        a, b = best
        merged = a + b
        known.add(merged)
        for wi in sorted(where.pop(best, ())):
            parts = words[wi]
            f = freqs[wi]
            for pair in zip(parts, parts[1:]):
                pair_counts[pair] -= f
            out, k = [], 0
            while k < len(parts):
                if k < len(parts) - 1 and parts[k] == a and parts[k + 1] == b:
                    out.append(merged)
                    k += 2
                else:
                    out.append(parts[k])
                    k += 1
            words[wi] = out
            for pair in zip(out, out[1:]):
                pair_counts[pair] += f
                where[pair].add(wi)
        pair_counts.pop(best, None)
    return Vocab(merges, specials)


# ---------------------------------------------------------------------------
# encode / decode
# ---------------------------------------------------------------------------


def encode_plain(text: str, vocab: Vocab) -> list[int]:
    """Ordinary BPE encoding; the text is not normalized."""
    ids: list[int] = []
    for word in pretokenize(text):
        ids.extend(vocab._bpe(word))
    return ids


def decode(ids: Iterable[int], vocab: Vocab, errors: str = "strict") -> str:
    return b"".join(vocab.piece(int(t)) for t in ids).decode("utf-8", errors=errors)


def idit_format(units: Sequence[Unit]) -> str:
    """Formatted text with the interruption token after every unit."""
    return "".join(u.surface + INTERRUPT for u in units).lstrip(" ")


def encode_idit(text: str, vocab: Vocab, return_intermediate: bool = False):
    """Encode so that no token crosses a Chinese-character / English-word boundary.

    Each unit (with its leading space) is followed by the interruption token,
    the sequence is tokenized with the interruption as an unbreakable special
    token, and then every interruption id is removed. With
    ``return_intermediate`` the sequence before removal is returned as well.
    """
    if INTERRUPT not in vocab.special_ids:
        raise VocabularyError("vocab has no interruption token")
    iid = vocab.interrupt_id
    with_interrupts: list[int] = []
    for unit in segment_units(normalize(text)):
        with_interrupts.extend(encode_plain(unit.surface, vocab))
        with_interrupts.append(iid)
    ids = [t for t in with_interrupts if t != iid]
    if return_intermediate:
        return ids, with_interrupts
    return ids


def encode_with_specials(text: str, vocab: Vocab) -> list[int]:
    """Plain encoding that maps literal special-token strings to their ids."""
    if not vocab.specials:
        return encode_plain(text, vocab)
    pattern = "(" + "|".join(re.escape(s) for s in vocab.specials) + ")"
    ids: list[int] = []
    for chunk in re.split(pattern, text):
        if chunk in vocab.special_ids:
            ids.append(vocab.special_ids[chunk])
        elif chunk:
            ids.extend(encode_plain(chunk, vocab))
    return ids


def encode(text: str, vocab: Vocab, idit: bool) -> list[int]:
    return encode_idit(text, vocab) if idit else encode_plain(normalize(text), vocab)
