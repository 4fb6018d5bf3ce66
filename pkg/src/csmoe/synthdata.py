"""Deterministic synthetic Mandarin-English code-switching corpus.

Utterances are stored as text plus a seed; acoustic frames are regenerated
on demand from ``(seed, SynthSpec)``. Units are dealt from shuffled decks so
per-language unit counts stay close to uniform. Each unit (Chinese character
or English word) owns a fixed prototype vector; a frame is that prototype
plus Gaussian noise. Code-switched utterances are Mandarin sentences with
embedded English spans.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tokenizer import normalize, segment_units

LANGS = ("zh", "en", "cs")

# Fixed pools; SynthSpec.zh_vocab / en_vocab take a prefix.
ZH_POOL = (
    "的一是不了人我在有他这中大来上国个到说们为子和你地出道也时年得就那要下以生会自着去之过家学对可"
    "里后小么心多天而能好都然没日于起还发成事只作当想看文无开手十用主行方又如前所本见经头面公同三已老"
)
EN_POOL = (
    "play game data model music video phone movie email project meeting report office "
    "class team code test check online share update design coffee driver ticket bank "
    "card party hotel taxi cloud order style brand sale price level point sense plan "
    "focus group topic book shop link page study issue photo paper radio smart staff "
    "label print power skill event"
).split()


class GenerationError(ValueError):
    pass


@dataclass
class SynthSpec:
    zh_vocab: int = 40
    en_vocab: int = 40
    utt_len: tuple[int, int] = (3, 7)
    cs_prob: float = 0.25
    span_len: tuple[int, int] = (1, 2)
    # one spliced row per unit at splice factor 5; ragged ranges are much harder
    frames_per_unit: tuple[int, int] = (5, 5)
    d_feat: int = 16
    noise: float = 0.3
    lang_offset: float = 1.0
    seed: int = 1234
    proto_seed: int = 7
    train_counts: tuple[int, int, int] = (667, 667, 666)
    test_counts: tuple[int, int, int] = (0, 0, 300)

    def __post_init__(self):
        for name in ("utt_len", "span_len", "frames_per_unit", "train_counts", "test_counts"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        for name in ("utt_len", "span_len", "frames_per_unit"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise GenerationError(f"{name} must be a nonempty positive range, got {(lo, hi)}")
        if self.noise < 0:
            raise GenerationError("noise sigma must be >= 0")
        if not 0.0 <= self.cs_prob <= 1.0:
            raise GenerationError("cs_prob must lie in [0, 1]")
        if not 1 <= self.zh_vocab <= len(ZH_POOL) or not 1 <= self.en_vocab <= len(EN_POOL):
            raise GenerationError("vocab sizes exceed the fixed pools")

    @property
    def zh_units(self) -> tuple[str, ...]:
        return tuple(ZH_POOL[: self.zh_vocab])

    @property
    def en_units(self) -> tuple[str, ...]:
        return tuple(EN_POOL[: self.en_vocab])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SynthSpec:
        return cls(**d)


@dataclass(frozen=True)
class Utterance:
    id: str
    lang: str
    text: str
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {"id": self.id, "lang": self.lang, "text": self.text, "seed": self.seed},
            ensure_ascii=False,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> Utterance:
        d = json.loads(line)
        return cls(d["id"], d["lang"], d["text"], int(d["seed"]))


@dataclass
class Corpus:
    spec: SynthSpec
    splits: dict[str, list[Utterance]] = field(default_factory=dict)

    def __getitem__(self, split: str) -> list[Utterance]:
        return self.splits[split]

    def find(self, utt_id: str) -> Utterance:
        for utts in self.splits.values():
            for u in utts:
                if u.id == utt_id:
                    return u
        raise KeyError(utt_id)


# ---------------------------------------------------------------------------
# text generation
# ---------------------------------------------------------------------------


def _join(pieces: list[tuple[str, str]]) -> str:
    out = []
    for k, (text, lang) in enumerate(pieces):
        if k and (lang == "en" or pieces[k - 1][1] == "en"):
            out.append(" ")
        out.append(text)
    return "".join(out)


class _Deck:
    """Cycles through shuffled copies of a pool so unit counts stay near-uniform."""

    def __init__(self, items, rng: np.random.Generator):
        self.items = tuple(items)
        self.rng = rng
        self.order: list[int] = []

    def draw(self) -> str:
        if not self.order:
            self.order = [int(i) for i in self.rng.permutation(len(self.items))]
        return self.items[self.order.pop()]


def _gen_text(rng: np.random.Generator, lang: str, spec: SynthSpec, decks: dict[str, _Deck]) -> str:
    n = int(rng.integers(spec.utt_len[0], spec.utt_len[1] + 1))
    if lang == "zh":
        return "".join(decks["zh"].draw() for _ in range(n))
    if lang == "en":
        return " ".join(decks["en"].draw() for _ in range(n))
    # zh-matrix sentence; some slots become English spans
    n = max(n, 2)
    is_span = rng.random(n) < spec.cs_prob
    if spec.cs_prob > 0:
        is_span[int(rng.integers(0, n))] = True
        if is_span.all():
            is_span[int(rng.integers(0, n))] = False
    pieces: list[tuple[str, str]] = []
    for slot in is_span:
        if slot:
            k = int(rng.integers(spec.span_len[0], spec.span_len[1] + 1))
            pieces.extend((decks["en"].draw(), "en") for _ in range(k))
        else:
            pieces.append((decks["zh"].draw(), "zh"))
    return _join(pieces)


def utterance_lang(text: str) -> str:
    langs = {u.lang for u in segment_units(text)}
    if "zh" in langs and "en" in langs:
        return "cs"
    return "en" if "en" in langs else "zh"


def _capacity(lang: str, spec: SynthSpec) -> float:
    lo, hi = spec.utt_len
    if lang == "zh":
        return sum(float(spec.zh_vocab) ** n for n in range(lo, hi + 1))
    if lang == "en":
        return sum(float(spec.en_vocab) ** n for n in range(lo, hi + 1))
    if spec.cs_prob == 0:
        return sum(float(spec.zh_vocab) ** n for n in range(lo, hi + 1))
    return sum(float(spec.zh_vocab) ** (n - 1) * spec.en_vocab * n for n in range(max(lo, 2), hi + 1))


def gen_corpus(spec: SynthSpec) -> Corpus:
    """Generate every split of the corpus; transcripts are unique corpus-wide."""
    corpus = Corpus(spec)
    seen: set[str] = set()
    for split_index, (split, counts) in enumerate((("train", spec.train_counts), ("test", spec.test_counts))):
        for lang, count in zip(LANGS, counts):
            if count > 0.5 * _capacity(lang, spec):
                raise GenerationError(f"{split}: {count} {lang} utterances exceed generator capacity")
        rng = np.random.default_rng([spec.seed, split_index])
        text_rng = np.random.default_rng([spec.seed, split_index, 1])
        decks = {"zh": _Deck(spec.zh_units, text_rng), "en": _Deck(spec.en_units, text_rng)}
        slots = [lang for lang, count in zip(LANGS, counts) for _ in range(count)]
        rng.shuffle(slots)
        utts = []
        for idx, lang in enumerate(slots):
            for _ in range(1000):
                seed = int(rng.integers(0, 2**31 - 1))
                text = normalize(_gen_text(text_rng, lang, spec, decks))
                if text not in seen:
                    break
            else:
                raise GenerationError(f"could not draw a unique {lang} utterance")
            seen.add(text)
            utts.append(Utterance(f"{split}-{idx:05d}", utterance_lang(text), text, seed))
        corpus.splits[split] = utts
    return corpus


def sample_texts(spec: SynthSpec, n: int, seed: int, exclude=()) -> list[str]:
    """``n`` fresh transcripts, languages in the train-split proportions; ``exclude`` is skipped."""
    rng = np.random.default_rng([spec.seed, seed, 2])
    decks = {"zh": _Deck(spec.zh_units, rng), "en": _Deck(spec.en_units, rng)}
    weights = np.array(spec.train_counts, dtype=float)
    if weights.sum() == 0:
        weights = np.ones(len(LANGS))
    langs = rng.choice(len(LANGS), size=n, p=weights / weights.sum())
    skip = set(exclude)
    out = []
    for k in langs:
        for _ in range(1000):
            text = normalize(_gen_text(rng, LANGS[k], spec, decks))
            if text not in skip:
                break
        else:
            raise GenerationError("could not draw a text outside the excluded set")
        out.append(text)
    return out


def write_corpus(corpus: Corpus, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "synth_spec.json").write_text(json.dumps(corpus.spec.to_dict(), indent=2, sort_keys=True) + "\n")
    for split, utts in corpus.splits.items():
        with open(out / f"{split}.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for u in utts:
                fh.write(u.to_json() + "\n")


def read_utterances(path) -> list[Utterance]:
    with open(path, encoding="utf-8") as fh:
        return [Utterance.from_json(line) for line in fh if line.strip()]


def read_corpus(corpus_dir) -> Corpus:
    root = Path(corpus_dir)
    spec = SynthSpec.from_dict(json.loads((root / "synth_spec.json").read_text()))
    corpus = Corpus(spec)
    for split in ("train", "test"):
        path = root / f"{split}.jsonl"
        if path.exists():
            corpus.splits[split] = read_utterances(path)
    return corpus


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------


def _text_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def prototype(unit_text: str, lang: str, spec: SynthSpec) -> np.ndarray:
    base = np.random.default_rng(_text_seed(spec.proto_seed, "unit", unit_text)).standard_normal(spec.d_feat)
    if spec.lang_offset:
        offset = np.random.default_rng(_text_seed(spec.proto_seed, "lang", lang)).standard_normal(spec.d_feat)
        base = base + spec.lang_offset * offset
    return base


@dataclass
class FrameMatrix:
    """Speech frames stored time-major: ``values[i]`` is frame i (d features)."""

    values: np.ndarray
    unit_index: np.ndarray
    lang: tuple[str, ...]

    @property
    def t(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


def render_frames(utt: Utterance, spec: SynthSpec) -> FrameMatrix:
    rng = np.random.default_rng([utt.seed, 1])
    rows, idx, langs = [], [], []
    for k, unit in enumerate(segment_units(utt.text)):
        n = int(rng.integers(spec.frames_per_unit[0], spec.frames_per_unit[1] + 1))
        proto = prototype(unit.text, unit.lang, spec)
        noise = rng.standard_normal((n, spec.d_feat)) * spec.noise
        rows.append(proto + noise)
        idx += [k] * n
        langs += [unit.lang] * n
    values = np.concatenate(rows, axis=0) if rows else np.zeros((0, spec.d_feat))
    return FrameMatrix(values, np.asarray(idx, dtype=np.int64), tuple(langs))


def min_prototype_distance(spec: SynthSpec) -> float:
    protos = [prototype(u, "zh", spec) for u in spec.zh_units] + [prototype(u, "en", spec) for u in spec.en_units]
    best = math.inf
    for i in range(len(protos)):
        for j in range(i + 1, len(protos)):
            best = min(best, float(np.linalg.norm(protos[i] - protos[j])))
    return best
