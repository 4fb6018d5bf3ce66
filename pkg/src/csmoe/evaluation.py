"""Language-attributed error rates for Mandarin-English code-switching.

Transcripts are split into units (Chinese characters, English words, other
symbol runs) and aligned with unit-level Levenshtein distance. Substitutions
and deletions count against the reference unit's language, insertions
against the hypothesis unit's language. CER is the Chinese rate, WER the
English rate, and MER uses every unit.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .tokenizer import Unit, normalize, segment_units


class PairingError(ValueError):
    pass


@dataclass(frozen=True)
class EditOp:
    kind: str  # sub | del | ins
    ref_index: int | None
    hyp_index: int | None


def _text(u) -> str:
    return u.text if isinstance(u, Unit) else u


def _table(ref: Sequence, hyp: Sequence) -> list[list[int]]:
    r = [_text(u) for u in ref]
    h = [_text(u) for u in hyp]
    prev = list(range(len(h) + 1))
    rows = [prev]
    for i in range(1, len(r) + 1):
        cur = [i] + [0] * len(h)
        ri = r[i - 1]
        for j in range(1, len(h) + 1):
            diag = prev[j - 1] + (ri != h[j - 1])
            up = prev[j] + 1
            left = cur[j - 1] + 1
            cur[j] = min(diag, up, left)
        rows.append(cur)
        prev = cur
    return rows


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Unit-level Levenshtein distance (single-row DP)."""
    r = [_text(u) for u in ref]
    h = [_text(u) for u in hyp]
    # a shared prefix or suffix never changes the distance
    while r and h and r[-1] == h[-1]:
        r.pop()
        h.pop()
    k = 0
    while k < len(r) and k < len(h) and r[k] == h[k]:
        k += 1
    r, h = r[k:], h[k:]
    if not r or not h:
        return len(r) + len(h)
    prev = list(range(len(h) + 1))
    for i, ri in enumerate(r, 1):
        cur = [i]
        left = i
        for j, hj in enumerate(h, 1):
            best = prev[j - 1] if ri == hj else prev[j - 1] + 1
            if prev[j] + 1 < best:
                best = prev[j] + 1
            if left + 1 < best:
                best = left + 1
            cur.append(best)
            left = best
        prev = cur
    return prev[-1]


def align(ref: Sequence, hyp: Sequence) -> list[EditOp]:
    """Minimum-cost edit script (matches omitted), in reference order.

    On equal cost the backtrace prefers a match, then substitution, then
    deletion, then insertion.
    """
    D = _table(ref, hyp)
    i, j = len(ref), len(hyp)
    ops: list[EditOp] = []
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            same = _text(ref[i - 1]) == _text(hyp[j - 1])
            if same and D[i][j] == D[i - 1][j - 1]:
                i, j = i - 1, j - 1
                continue
            if not same and D[i][j] == D[i - 1][j - 1] + 1:
                ops.append(EditOp("sub", i - 1, j - 1))
                i, j = i - 1, j - 1
                continue
        if i > 0 and D[i][j] == D[i - 1][j] + 1:
            ops.append(EditOp("del", i - 1, None))
            i -= 1
            continue
        ops.append(EditOp("ins", None, j - 1))
        j -= 1
    ops.reverse()
    return ops


@dataclass
class ErrorCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_count: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def rate(self) -> float:
        if self.ref_count == 0:
            return 0.0 if self.errors == 0 else math.inf
        return 100.0 * self.errors / self.ref_count

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rate"] = self.rate
        return d


@dataclass
class ErrorReport:
    by_lang: dict[str, ErrorCounts] = field(
        default_factory=lambda: {k: ErrorCounts() for k in ("zh", "en", "other", "all")}
    )
    utterances: int = 0

    @property
    def cer(self) -> float:
        return self.by_lang["zh"].rate

    @property
    def wer(self) -> float:
        return self.by_lang["en"].rate

    @property
    def mer(self) -> float:
        return self.by_lang["all"].rate

    def summary_line(self) -> str:
        return f"CER={self.cer:.2f} WER={self.wer:.2f} MER={self.mer:.2f}"

    def to_dict(self) -> dict:
        return {
            "utterances": self.utterances,
            "cer": self.cer,
            "wer": self.wer,
            "mer": self.mer,
            "by_lang": {k: v.to_dict() for k, v in self.by_lang.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{'lang':<6} {'N':>6} {'S':>5} {'D':>5} {'I':>5} {'rate%':>8}"]
        for lang, c in self.by_lang.items():
            lines.append(
                f"{lang:<6} {c.ref_count:>6} {c.substitutions:>5} {c.deletions:>5} {c.insertions:>5} {c.rate:>8.2f}"
            )
        lines.append(self.summary_line())
        return "\n".join(lines)


def _accumulate(report: ErrorReport, ref: list[Unit], hyp: list[Unit]) -> None:
    for u in ref:
        report.by_lang[u.lang].ref_count += 1
        report.by_lang["all"].ref_count += 1
    for op in align(ref, hyp):
        if op.kind == "ins":
            lang = hyp[op.hyp_index].lang
        else:
            lang = ref[op.ref_index].lang
        for key in (lang, "all"):
            c = report.by_lang[key]
            if op.kind == "sub":
                c.substitutions += 1
            elif op.kind == "del":
                c.deletions += 1
            else:
                c.insertions += 1


def units_of(text: str) -> list[Unit]:
    return segment_units(normalize(text))


def score(refs: Iterable[tuple[str, str]], hyps: Iterable[tuple[str, str]]) -> ErrorReport:
    """Corpus-level report for (id, text) pairs; hypotheses are matched by id."""
    refs = list(refs)
    hyp_map: dict[str, str] = {}
    for uid, text in hyps:
        if uid in hyp_map:
            raise PairingError(f"duplicate hypothesis id {uid!r}")
        hyp_map[uid] = text
    ref_ids = [uid for uid, _ in refs]
    if len(set(ref_ids)) != len(ref_ids):
        raise PairingError("duplicate reference ids")
    if set(ref_ids) != set(hyp_map):
        missing = sorted(set(ref_ids) - set(hyp_map))[:3]
        extra = sorted(set(hyp_map) - set(ref_ids))[:3]
        raise PairingError(f"reference/hypothesis ids differ (missing {missing}, unexpected {extra})")
    report = ErrorReport()
    for uid, text in refs:
        _accumulate(report, units_of(text), units_of(hyp_map[uid]))
        report.utterances += 1
    return report


def read_pairs(path) -> list[tuple[str, str]]:
    """Read ``id<TAB>text`` lines or a JSONL corpus with ``id`` and ``text`` fields."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.lstrip().startswith("{"):
                d = json.loads(line)
                pairs.append((d["id"], d["text"]))
            else:
                uid, _, text = line.partition("\t")
                pairs.append((uid, text))
    return pairs
