"""Acceptance criteria, one test and one PASS/FAIL line each.

Criteria 5-8 train real models: a 3-seed matrix of strategies A, B, E, F
and the linear connector, plus one repeated run. Expect about 45 minutes on
one core. The learnability threshold comes from ``calibration.json``,
written by ``scripts/calibrate.py``.
"""

import json
import random
import time
from pathlib import Path

import numpy as np
import pytest

from csmoe.connector import Connector, ConnectorConfig, Router, RoutingMode, downsample, forward_dense, forward_lse, route_probs
from csmoe.evaluation import edit_distance, score
from csmoe.experiments import VARIANTS, mean_mer, run_matrix, run_variant
from csmoe.numerics import Tensor
from csmoe.synthdata import SynthSpec, gen_corpus
from csmoe.tokenizer import decode, encode_idit, normalize, train_bpe
from helpers import numerical_grad, rel_err
from test_evaluation import all_strings, single_edit_graph
from test_numerics import OPS
from test_tokenizer import random_mixed, within_one_unit
from test_training import grad_setup, stage2_grad_error

ROOT = Path(__file__).resolve().parent.parent
SEEDS = (0, 1, 2)
MATRIX = ("F", "A", "B", "E", "linear")


def op_grad_error(build, shapes, seed, positive):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    if positive:
        arrays = [np.abs(a) + 0.5 for a in arrays]
    w = np.random.default_rng(seed + 1000).normal(size=build(*[Tensor(a) for a in arrays]).shape)
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    (build(*leaves) * w).sum().backward()

    worst = 0.0
    for leaf, a in zip(leaves, arrays):

        def f():
            return float((build(*[Tensor(x) for x in arrays]).data * w).sum())

        worst = max(worst, rel_err(leaf.grad, numerical_grad(f, a)))
    return worst


def test_criterion_1_gradients(acceptance_line):
    t0 = time.perf_counter()
    worst_op = max(
        op_grad_error(build, shapes, seed, positive) for build, shapes, positive in OPS.values() for seed in range(20)
    )
    setup = grad_setup()
    worst_loss = max(stage2_grad_error(setup, seed) for seed in range(20))
    elapsed = time.perf_counter() - t0
    ok = worst_op < 1e-4 and worst_loss < 1e-4 and elapsed < 60
    acceptance_line(
        1, ok, f"{len(OPS)} ops + stage-2 loss x 20 seeds, max rel err {max(worst_op, worst_loss):.1e} (< 1e-4), {elapsed:.1f} s (< 60)"
    )
    assert ok


def test_criterion_2_idit(acceptance_line):
    vocab = train_bpe([u.text for u in gen_corpus(SynthSpec())["train"]], 640)
    rng = random.Random(2024)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(1000):
        s = random_mixed(rng)
        ids = encode_idit(s, vocab)
        norm = normalize(s)
        if decode(ids, vocab) != norm or vocab.interrupt_id in ids or not within_one_unit(ids, vocab, norm):
            bad += 1
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and elapsed < 10
    acceptance_line(2, ok, f"1000 random strings, {bad} failures, {elapsed:.2f} s (< 10)")
    assert ok


def test_criterion_3_routing(acceptance_line):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    c = Connector(ConnectorConfig(d_feat=3, factor=2, hidden=5, d_model=4), np.random.default_rng(0))
    checks = {}

    X = rng.normal(size=(50, 6)) * 5
    P = route_probs(X, c.router).data
    checks["normalisation"] = float(np.abs(P.sum(-1) - 1).max()) <= 1e-12
    shifted = Router(c.router.W.data, c.router.b.data + 37.0)
    checks["shift invariance"] = np.allclose(route_probs(X, shifted).data, P, rtol=0, atol=1e-12)

    hard = Router(rng.normal(size=(2, 6)) * 1e4, np.zeros(2))
    Ph = route_probs(X, hard).data
    one_hot = set(np.unique(Ph)) <= {0.0, 1.0}
    same = np.array_equal(forward_lse(X, "cs", hard, c.experts).data, forward_dense(X, hard, c.experts).data)
    checks["one-hot dense == hard"] = one_hot and same

    zero = True
    for lang, unused in (("zh", 1), ("en", 0)):
        for p in c.parameters().values():
            p.zero_grad()
        c(X, RoutingMode.LSE_HARD, lang).sum().backward()
        zero &= all(not p.grad.any() for p in c.experts[unused].parameters().values())
    checks["unselected expert zero grad"] = zero

    F = rng.normal(size=(23, 3))
    D = downsample(F, 5)
    flat = F.reshape(-1)
    checks["downsample values"] = np.array_equal(D.reshape(-1)[: flat.size], flat) and not D.reshape(-1)[flat.size :].any()

    elapsed = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    ok = not failed and elapsed < 10
    acceptance_line(3, ok, f"{len(checks)} routing checks, failed: {failed or 'none'}, {elapsed:.2f} s (< 10)")
    assert ok


def test_criterion_4_scorer(acceptance_line):
    from scipy.sparse.csgraph import shortest_path

    t0 = time.perf_counter()
    strings = all_strings("abc", 6)
    dist = shortest_path(single_edit_graph(strings, "abc"), unweighted=True, directed=False)
    bad = sum(edit_distance(r, h) != dist[i, j] for i, r in enumerate(strings) for j, h in enumerate(strings))
    line = score([("u", "你好 world")], [("u", "你 world")]).summary_line()
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and line == "CER=50.00 WER=0.00 MER=33.33" and elapsed < 30
    acceptance_line(4, ok, f"{len(strings) ** 2} pairs, {bad} mismatches; example {line}; {elapsed:.1f} s (< 30)")
    assert ok


# ---------------------------------------------------------------------------
# trained models
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def corpus():
    return gen_corpus(SynthSpec())


@pytest.fixture(scope="module")
def matrix(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("matrix")
    t0 = time.perf_counter()
    results = run_matrix(corpus, MATRIX, SEEDS, out)
    return out, results, time.perf_counter() - t0


def threshold():
    return json.loads((ROOT / "calibration.json").read_text())["threshold_mer"]


def test_criterion_5_learnability(matrix, acceptance_line):
    _, results, _ = matrix
    run = next(r for r in results if r.variant == "F" and r.seed == 0)
    limit = threshold()
    ok = run.mer < limit and run.seconds < 15 * 60
    acceptance_line(
        5, ok, f"strategy F seed 0 held-out MER {run.mer:.2f}% (< {limit:.1f}%), {run.seconds:.0f} s (< 900)"
    )
    assert ok


def test_criterion_6_connector_trend(matrix, acceptance_line):
    means = mean_mer(matrix[1])
    ok = means["F"] <= means["linear"]
    acceptance_line(6, ok, f"mean MER over 3 seeds: MoE {means['F']:.2f}% <= linear {means['linear']:.2f}%")
    assert ok


def test_criterion_7_strategy_trend(matrix, acceptance_line):
    _, results, elapsed = matrix
    means = mean_mer(results)
    ok = means["F"] <= means["A"] and means["E"] <= means["B"] and elapsed <= 2 * 3600
    acceptance_line(
        7,
        ok,
        f"mean MER F {means['F']:.2f}% <= A {means['A']:.2f}%, E {means['E']:.2f}% <= B {means['B']:.2f}%; "
        f"matrix {elapsed / 60:.1f} min (<= 120)",
    )
    assert ok


def test_criterion_8_determinism(matrix, corpus, tmp_path, acceptance_line):
    first = matrix[0] / "seed0" / "F"
    run_variant(corpus, VARIANTS["F"], 0, out_dir=tmp_path)
    names = ("stage1.ckpt", "stage2.ckpt", "vocab.txt", "hyps.tsv", "report.json")
    differ = [n for n in names if (first / n).read_bytes() != (tmp_path / n).read_bytes()]
    ok = not differ
    acceptance_line(8, ok, f"repeat of the F run: {len(names) - len(differ)}/{len(names)} artifacts byte-identical")
    assert ok
