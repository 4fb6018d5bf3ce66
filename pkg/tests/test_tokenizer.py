import random
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from csmoe.synthdata import SynthSpec, gen_corpus
from csmoe.tokenizer import (
    INTERRUPT,
    TextEncodingError,
    TrainingError,
    Unit,
    Vocab,
    VocabularyError,
    decode,
    encode_idit,
    encode_plain,
    encode_with_specials,
    join_units,
    normalize,
    segment_units,
    train_bpe,
)


@pytest.fixture(scope="module")
def corpus():
    return gen_corpus(SynthSpec())


@pytest.fixture(scope="module")
def vocab(corpus):
    return train_bpe([u.text for u in corpus["train"]], 640)


MIXED_ALPHABET = list("你好世界中文学习的了是在abcXYZ'  \t\n0123,.!?") + ["é", "😀", "ア"]


def random_mixed(rng: random.Random, max_len: int = 24) -> str:
    return "".join(rng.choice(MIXED_ALPHABET) for _ in range(rng.randint(0, max_len)))


def token_extents(ids, vocab):
    pos, out = 0, []
    for t in ids:
        n = len(vocab.piece(t))
        out.append((pos, pos + n))
        pos += n
    return out


def unit_extents(text):
    """Byte extents of each unit including its leading separator."""
    pos, out = 0, []
    for u in segment_units(text):
        n = len(u.surface.encode("utf-8"))
        if not out and u.preceded_by_space:
            # normalized text never starts with a space
            raise AssertionError("leading space on first unit")
        out.append((pos, pos + n))
        pos += n
    return out


def within_one_unit(ids, vocab, text) -> bool:
    units = unit_extents(text)
    for a, b in token_extents(ids, vocab):
        if not any(lo <= a and b <= hi for lo, hi in units):
            return False
    return True


# ---------------------------------------------------------------------------
# normalize / segmentation
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "raw,expected",
    [("  hello   world ", "hello world"), ("你好world", "你好world"), ("A\t\nB", "A B"), ("", "")],
)
def test_normalize_examples(raw, expected):
    assert normalize(raw) == expected


def test_normalize_keeps_case():
    assert normalize("Hello HELLO") == "Hello HELLO"


def test_normalize_rejects_invalid_utf8():
    with pytest.raises(TextEncodingError):
        normalize(b"\xff\xfeabc")


def test_segment_examples():
    assert segment_units("你好 world") == [Unit("你", "zh"), Unit("好", "zh"), Unit("world", "en", True)]
    assert segment_units("play了game") == [Unit("play", "en"), Unit("了", "zh"), Unit("game", "en")]
    assert segment_units("") == []


def test_segment_other_symbols():
    units = segment_units("ok, 3.5你")
    assert [(u.text, u.lang) for u in units] == [("ok", "en"), (",", "other"), ("3.5", "other"), ("你", "zh")]


@given(st.text(st.characters(blacklist_categories=("Cs",)), max_size=40))
def test_units_rejoin_to_normalized_text(raw):
    text = normalize(raw)
    assert join_units(segment_units(text)) == text


# ---------------------------------------------------------------------------
# BPE training
# ---------------------------------------------------------------------------


def test_first_merge_on_single_candidate():
    v = train_bpe(["aaaa"], 261)
    assert v.merges[0] == (b"a", b"a")


def test_tie_break_is_lexicographic():
    # "ab" and "cd" both occur once; the byte-wise smaller pair wins
    v = train_bpe(["cd ab"], 261)
    assert v.merges[0] == (b" ", b"a")


def test_training_errors():
    with pytest.raises(TrainingError):
        train_bpe([], 300)
    with pytest.raises(TrainingError):
        train_bpe(["abc"], 10)


def test_ids_dense_and_byte_fallback(vocab):
    assert len(vocab) == 640
    for b in range(256):
        assert vocab.piece(b) == bytes([b])
    assert sorted(vocab.bytes_to_id.values()) == [i for i in range(640) if i not in vocab.special_ids.values()]


def test_merges_never_spell_specials(vocab):
    specials = {s.encode() for s in vocab.specials}
    assert not any(a + b in specials for a, b in vocab.merges)


def test_corpus_round_trip(corpus, vocab):
    for u in corpus["train"][:500]:
        assert decode(encode_plain(u.text, vocab), vocab) == u.text


def test_frequent_words_are_single_tokens(corpus, vocab):
    spec = corpus.spec
    for w in spec.en_units:
        assert len(encode_plain(" " + w, vocab)) == 1, w
    for ch in spec.zh_units:
        assert len(encode_plain(ch, vocab)) == 1, ch


def test_vocab_file_round_trip(tmp_path, vocab):
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    back = Vocab.load(path)
    assert back.merges == vocab.merges and back.specials == vocab.specials
    assert back.id_to_bytes == vocab.id_to_bytes


def test_decode_unknown_id(vocab):
    with pytest.raises(VocabularyError):
        decode([len(vocab)], vocab)


def test_empty_encodes_to_nothing(vocab):
    assert encode_plain("", vocab) == []
    assert encode_idit("", vocab) == []


def test_special_literal_is_plain_bytes(vocab):
    ids = encode_plain("<|I|>", vocab)
    assert vocab.interrupt_id not in ids
    assert encode_with_specials("a<|I|>b", vocab) == encode_plain("a", vocab) + [vocab.interrupt_id] + encode_plain(
        "b", vocab
    )


# ---------------------------------------------------------------------------
# IDIT
# ---------------------------------------------------------------------------


def test_idit_unrolled_definition(vocab):
    expected = encode_plain("你", vocab) + encode_plain("好", vocab) + encode_plain(" world", vocab)
    assert encode_idit("你好 world", vocab) == expected


def test_idit_single_token_unit_matches_plain(vocab):
    assert encode_idit("game", vocab) == encode_plain("game", vocab)


def test_idit_intermediate_has_interrupt_after_each_unit(vocab):
    text = "我 play了 game"
    ids, inter = encode_idit(text, vocab, return_intermediate=True)
    assert inter.count(vocab.interrupt_id) == len(segment_units(text))
    assert inter[-1] == vocab.interrupt_id
    assert [t for t in inter if t != vocab.interrupt_id] == ids


def test_plain_can_cross_units_but_idit_cannot(corpus, vocab):
    crossing = 0
    for u in corpus["train"]:
        plain = encode_plain(u.text, vocab)
        if not within_one_unit(plain, vocab, u.text):
            crossing += 1
        assert within_one_unit(encode_idit(u.text, vocab), vocab, u.text)
    # multi-character Chinese tokens exist in the trained vocabulary
    assert crossing > 0


def test_idit_length_bounds(corpus, vocab):
    for u in corpus["train"][:300]:
        units = segment_units(u.text)
        ids = encode_idit(u.text, vocab)
        assert len(ids) >= len(units)
        single = all(len(encode_plain(x.surface, vocab)) == 1 for x in units)
        assert (len(ids) == len(units)) == single


def test_idit_needs_interrupt_token():
    v = train_bpe(["abc"], 262, specials=("<|pad|>", "<|bos|>", "<|eos|>"))
    with pytest.raises(VocabularyError):
        encode_idit("abc", v)


@given(st.text(alphabet=st.sampled_from(MIXED_ALPHABET), max_size=30))
def test_idit_properties_hypothesis(vocab, s):
    ids = encode_idit(s, vocab)
    norm = normalize(s)
    assert decode(ids, vocab) == norm
    assert vocab.interrupt_id not in ids
    assert decode(encode_plain(norm, vocab), vocab) == norm
    assert within_one_unit(ids, vocab, norm)


def test_idit_thousand_random_strings(vocab):
    rng = random.Random(0)
    t0 = time.perf_counter()
    for _ in range(1000):
        s = random_mixed(rng)
        ids = encode_idit(s, vocab)
        assert decode(ids, vocab) == normalize(s)
        assert vocab.interrupt_id not in ids
        assert within_one_unit(ids, vocab, normalize(s))
    assert time.perf_counter() - t0 < 10


def test_interrupt_constant_is_reserved(vocab):
    assert vocab.interrupt_id in vocab.special_ids.values()
    assert vocab.piece(vocab.interrupt_id) == INTERRUPT.encode()
