from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csmoe.synthdata import (
    EN_POOL,
    ZH_POOL,
    GenerationError,
    SynthSpec,
    Utterance,
    gen_corpus,
    min_prototype_distance,
    prototype,
    read_corpus,
    render_frames,
    write_corpus,
)
from csmoe.tokenizer import normalize, segment_units


@pytest.fixture(scope="module")
def corpus():
    return gen_corpus(SynthSpec())


def test_default_split_sizes(corpus):
    assert len(corpus["train"]) == 2000 and len(corpus["test"]) == 300
    counts = Counter(u.lang for u in corpus["train"])
    assert counts == {"zh": 667, "en": 667, "cs": 666}
    assert {u.lang for u in corpus["test"]} == {"cs"}


def test_files_are_byte_identical(tmp_path):
    small = SynthSpec(train_counts=(20, 20, 20), test_counts=(0, 0, 10))
    write_corpus(gen_corpus(small), tmp_path / "a")
    write_corpus(gen_corpus(small), tmp_path / "b")
    for name in ("synth_spec.json", "train.jsonl", "test.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_corpus_file_round_trip(tmp_path, corpus):
    write_corpus(corpus, tmp_path)
    back = read_corpus(tmp_path)
    assert back.spec == corpus.spec
    assert back["train"] == corpus["train"] and back["test"] == corpus["test"]


def test_no_cs_when_probability_zero():
    c = gen_corpus(SynthSpec(cs_prob=0.0, train_counts=(30, 30, 30), test_counts=(0, 0, 0)))
    assert "cs" not in {u.lang for u in c["train"]}


def test_unit_histogram_near_uniform(corpus):
    # independent count: plain character / whitespace scan, no segmenter
    zh, en = Counter(), Counter()
    for u in corpus["train"]:
        for chunk in u.text.split(" "):
            if chunk.isascii():
                en[chunk] += 1
            else:
                zh.update(chunk)
    spec = corpus.spec
    assert set(zh) == set(spec.zh_units) and set(en) == set(spec.en_units)
    for hist in (zh, en):
        mean = sum(hist.values()) / len(hist)
        assert all(abs(c - mean) / mean <= 0.20 for c in hist.values())


def test_labels_match_content(corpus):
    for u in corpus["train"] + corpus["test"]:
        langs = {x.lang for x in segment_units(u.text)}
        assert (u.lang == "cs") == ({"zh", "en"} <= langs)
        assert normalize(u.text) == u.text


def test_cs_is_zh_matrix(corpus):
    for u in corpus["test"]:
        units = segment_units(u.text)
        assert sum(x.lang == "zh" for x in units) >= 1 and sum(x.lang == "en" for x in units) >= 1
        assert all(x.lang in ("zh", "en") for x in units)


def test_transcripts_unique(corpus):
    texts = [u.text for u in corpus["train"] + corpus["test"]]
    assert len(set(texts)) == len(texts)


def test_capacity_error():
    with pytest.raises(GenerationError):
        gen_corpus(SynthSpec(zh_vocab=2, utt_len=(1, 1), train_counts=(5, 0, 0), test_counts=(0, 0, 0)))


@pytest.mark.parametrize(
    "kw", [{"utt_len": (3, 2)}, {"frames_per_unit": (0, 2)}, {"noise": -0.1}, {"cs_prob": 1.5}, {"zh_vocab": 10**4}]
)
def test_spec_validation(kw):
    with pytest.raises(GenerationError):
        SynthSpec(**kw)


def test_pools_are_well_formed():
    assert len(set(ZH_POOL)) == len(ZH_POOL)
    assert len(set(EN_POOL)) == len(EN_POOL)
    assert all(w.isalpha() and w.isascii() for w in EN_POOL)


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------


def test_frames_deterministic(corpus):
    u = corpus["train"][0]
    a, b = render_frames(u, corpus.spec), render_frames(u, corpus.spec)
    assert np.array_equal(a.values, b.values)


def test_zero_noise_frames_equal_prototype():
    spec = SynthSpec(noise=0.0)
    u = Utterance("x", "cs", "我 play 了", 3)
    fm = render_frames(u, spec)
    units = segment_units(u.text)
    for i in range(fm.t):
        unit = units[fm.unit_index[i]]
        assert np.array_equal(fm.values[i], prototype(unit.text, unit.lang, spec))


def test_frame_alignment_and_count():
    spec = SynthSpec()
    u = Utterance("x", "cs", "我 play game 了", 11)
    fm = render_frames(u, spec)
    units = segment_units(u.text)
    counts = Counter(fm.unit_index.tolist())
    assert fm.t == sum(counts.values())
    assert sorted(counts) == list(range(len(units)))
    lo, hi = spec.frames_per_unit
    assert all(lo <= c <= hi for c in counts.values())
    assert list(fm.lang) == [units[k].lang for k in fm.unit_index]
    assert {"zh", "en"} <= set(fm.lang)


def test_prototypes_well_separated():
    spec = SynthSpec()
    assert min_prototype_distance(spec) > 4 * spec.noise


@settings(max_examples=20)
@given(st.integers(0, 2**31 - 1))
def test_frame_noise_has_requested_scale(seed):
    spec = SynthSpec(frames_per_unit=(40, 40))
    u = Utterance("x", "zh", "我", seed)
    fm = render_frames(u, spec)
    resid = fm.values - prototype("我", "zh", spec)
    assert abs(resid.std() - spec.noise) < 0.1
