"""Multi-run experiments over strategies, connectors and seeds.

The tokenizer and pretrained base LM depend only on the corpus and the seed,
so ``run_matrix`` builds them once per seed and reuses them for every
variant.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

from .connector import ConnectorConfig
from .evaluation import ErrorReport, score
from .synthdata import Corpus
from .training import RunSettings, SpeechModel, pretrain_base, prepare, run_pipeline, transcribe


@dataclass(frozen=True)
class Variant:
    name: str
    strategy: str
    connector: str = "moe"  # moe | linear


# The single-FFN connector cannot route by language, so it runs with the
# strategy that matches F apart from the stage-1 expert specialisation.
VARIANTS: dict[str, Variant] = {
    v.name: v
    for v in (
        Variant("A", "A"),
        Variant("B", "B"),
        Variant("C", "C"),
        Variant("D", "D"),
        Variant("E", "E"),
        Variant("F", "F"),
        Variant("linear", "E", "linear"),
    )
}


def settings_for(variant: Variant, seed: int, like: RunSettings | None = None) -> RunSettings:
    s = replace(like or RunSettings(), strategy=variant.strategy, seed=seed)
    if variant.connector == "linear":
        s = replace(s, connector=ConnectorConfig.linear_baseline(s.connector))
    elif variant.connector != "moe":
        raise ValueError(f"unknown connector kind {variant.connector!r}")
    return s


def evaluate(model: SpeechModel, settings: RunSettings, corpus: Corpus, split: str = "test"):
    """Greedy transcripts of ``split`` and their error report."""
    utts = corpus[split]
    examples = prepare(utts, corpus.spec, model.vocab, model.connector.cfg.factor)
    hyps = transcribe(model, examples, settings.inference_mode(), settings.decode_max_len)
    pairs = [(u.id, h) for u, h in zip(utts, hyps)]
    return pairs, score([(u.id, u.text) for u in utts], pairs)


@dataclass
class RunResult:
    variant: str
    seed: int
    report: ErrorReport
    seconds: float
    checkpoints: dict[str, str] = field(default_factory=dict)

    @property
    def mer(self) -> float:
        return self.report.mer

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "mer": self.report.mer,
            "cer": self.report.cer,
            "wer": self.report.wer,
            "seconds": round(self.seconds, 1),
        }


def run_variant(
    corpus: Corpus,
    variant: Variant,
    seed: int,
    base=None,
    out_dir=None,
    like: RunSettings | None = None,
) -> RunResult:
    """Train and score one variant; ``out_dir`` receives checkpoints, hypotheses and the report."""
    t0 = time.perf_counter()
    settings = settings_for(variant, seed, like)
    res = run_pipeline(corpus, settings, out_dir, base=base)
    pairs, report = evaluate(res.model, settings, corpus)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "hyps.tsv").write_text("".join(f"{k}\t{h}\n" for k, h in pairs), encoding="utf-8")
        (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return RunResult(variant.name, seed, report, time.perf_counter() - t0, res.checkpoints)


def run_matrix(
    corpus: Corpus,
    variants: Sequence[str],
    seeds: Sequence[int],
    out_dir=None,
    like: RunSettings | None = None,
    on_result: Callable[[RunResult], None] | None = None,
) -> list[RunResult]:
    results = []
    for seed in seeds:
        t0 = time.perf_counter()
        base = pretrain_base(corpus, replace(like or RunSettings(), seed=seed))
        pre_seconds = time.perf_counter() - t0
        for name in variants:
            sub = None if out_dir is None else Path(out_dir) / f"seed{seed}" / name
            r = run_variant(corpus, VARIANTS[name], seed, base, sub, like)
            r.seconds += pre_seconds
            results.append(r)
            if on_result is not None:
                on_result(r)
    return results


def mean_mer(results: Sequence[RunResult]) -> dict[str, float]:
    by: dict[str, list[float]] = {}
    for r in results:
        by.setdefault(r.variant, []).append(r.mer)
    return {k: sum(v) / len(v) for k, v in by.items()}


def write_results(results: Sequence[RunResult], path) -> None:
    data = {"runs": [r.to_dict() for r in results], "mean_mer": mean_mer(results)}
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
