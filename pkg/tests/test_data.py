from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuron_alloc.data import (
    SyntheticTaskSpec, Transform, Vocabulary, build_vocab, build_vocab_from_dir, corpus_paths,
    discover_pairs, generate_synthetic, load_corpora, load_corpus, parse_pair, synthetic_corpora,
    write_parallel, write_synthetic,
)
from neuron_alloc.errors import ConfigError, DataError


def test_parse_pair():
    assert parse_pair("en2it") == ("en", "it")
    with pytest.raises(DataError):
        parse_pair("english")
    with pytest.raises(DataError):
        parse_pair("a2b2c")


def test_transforms():
    assert Transform.parse("identity_copy").apply([3, 1, 4], 10) == [3, 1, 4]
    assert Transform.parse("reversal").apply([1, 2, 3], 10) == [3, 2, 1]
    assert Transform.parse("vocab_shift:3").apply([1, 2], 10) == [4, 5]
    assert Transform.parse("vocab_shift:3").apply([8, 9], 10) == [1, 2]
    with pytest.raises(ConfigError):
        Transform.parse("vocab_shift")
    with pytest.raises(ConfigError):
        Transform.parse("rot13")


@given(st.lists(st.integers(0, 9), min_size=1, max_size=12), st.integers(1, 9))
def test_transforms_are_bijective(ids, offset):
    for tr in (Transform("identity_copy"), Transform("reversal"), Transform("vocab_shift", offset)):
        out = tr.apply(ids, 10)
        assert len(out) == len(ids)
        assert sorted(out) == sorted(tr.apply(sorted(ids), 10))
    shift = Transform("vocab_shift", offset)
    assert Transform("vocab_shift", 10 - offset).apply(shift.apply(ids, 10), 10) == ids


def _spec(**kw):
    base = dict(base_vocab=10, min_len=3, max_len=6, sizes=(("train", 40), ("dev", 10), ("test", 10)), seed=1)
    base.update(kw)
    return SyntheticTaskSpec(**base)


def test_synthetic_targets_follow_transforms():
    data = generate_synthetic(_spec())
    assert sorted(data) == ["src2cp", "src2rv", "src2sh"]
    for split in ("train", "dev", "test"):
        src, tgt = data["src2cp"][split]
        assert src == tgt
        src, tgt = data["src2rv"][split]
        assert all(t == s[::-1] for s, t in zip(src, tgt))
        src, tgt = data["src2sh"][split]
        for s, t in zip(src, tgt):
            assert [int(w[1:]) for w in t] == [(int(w[1:]) + 3) % 10 for w in s]


def test_synthetic_sizes_lengths_and_disjoint_splits():
    data = generate_synthetic(_spec())
    for splits in data.values():
        assert {k: len(v[0]) for k, v in splits.items()} == {"train": 40, "dev": 10, "test": 10}
        seen = [{tuple(s) for s in splits[name][0]} for name in ("train", "dev", "test")]
        assert not (seen[0] & seen[1] or seen[0] & seen[2] or seen[1] & seen[2])
        for src, _ in splits.values():
            assert all(3 <= len(s) <= 6 for s in src)


def test_synthetic_deterministic_per_seed():
    assert generate_synthetic(_spec()) == generate_synthetic(_spec())
    assert generate_synthetic(_spec()) != generate_synthetic(_spec(seed=2))


def test_many_to_many_pairs():
    spec = _spec(scenario="many_to_many", languages=(("a", "identity_copy"), ("b", "reversal")))
    assert spec.pairs() == ["a2b", "b2a"]
    data = generate_synthetic(spec)
    src, tgt = data["b2a"]["train"]
    assert all(t == s[::-1] for s, t in zip(src, tgt))


def test_spec_validation():
    with pytest.raises(ConfigError, match="vocab_shift"):
        _spec(languages=(("src", "identity_copy"), ("sh", "vocab_shift:12"))).validate()
    with pytest.raises(ConfigError, match="share transform"):
        _spec(languages=(("src", "identity_copy"), ("a", "reversal"), ("b", "reversal"))).validate()
    with pytest.raises(ConfigError):
        _spec(scenario="few_to_few").validate()
    with pytest.raises(ConfigError):
        _spec(min_len=5, max_len=2).validate()
    with pytest.raises(ConfigError, match="distinct"):
        generate_synthetic(_spec(base_vocab=2, min_len=1, max_len=1,
                                 languages=(("src", "identity_copy"), ("rv", "reversal"))))


def test_vocabulary_layout_and_size():
    vocab = build_vocab([["b", "a"], ["c", "a"]], ["it", "de"])
    assert vocab.tokens == ["<pad>", "<eos>", "<unk>", "<2de>", "<2it>", "a", "b", "c"]
    assert len(vocab) == 3 + 2 + 3
    assert vocab.encode(["a", "zzz"]) == [5, 2]
    assert vocab.decode([5, 6, 0, 7, 1, 5]) == ["a", "b", "c"]
    assert vocab.lang_id("it") == 4
    with pytest.raises(DataError):
        vocab.lang_id("fr")


def test_vocabulary_limit_lists_tokens():
    with pytest.raises(DataError, match="tokens over the limit: c"):
        build_vocab([["a", "b", "c"]], ["it"], max_size=6)
    with pytest.raises(DataError):
        Vocabulary(["<eos>", "<pad>", "<unk>"])


def test_two_line_corpus_gets_language_token(tmp_path):
    write_parallel(tmp_path, "en2it", "train", [["hello", "world"], ["bye"]], [["ciao", "mondo"], ["addio"]])
    vocab = build_vocab_from_dir(tmp_path, ["en2it"])
    corpus = load_corpus(tmp_path, "en2it", "train", vocab)
    assert len(corpus) == 2
    assert all(s[0] == vocab.lang_id("it") for s in corpus.sources)
    assert vocab.decode(corpus.targets[0]) == ["ciao", "mondo"]
    assert build_vocab_from_dir(tmp_path, ["en2it"]) == vocab


def test_line_count_mismatch_reports_counts(tmp_path):
    write_parallel(tmp_path, "en2it", "train", [["a"], ["b"]], [["c"], ["d"]])
    _, tgt_path = corpus_paths(tmp_path, "en2it", "train")
    tgt_path.write_text("c\n", encoding="utf-8")
    with pytest.raises(DataError, match="has 2.*has 1"):
        build_vocab_from_dir(tmp_path, ["en2it"])


def test_empty_sentence_and_missing_file(tmp_path):
    write_parallel(tmp_path, "en2it", "train", [["a"], []], [["c"], ["d"]])
    vocab = build_vocab_from_dir(tmp_path, ["en2it"])
    with pytest.raises(DataError, match="line 2"):
        load_corpus(tmp_path, "en2it", "train", vocab)
    with pytest.raises(DataError, match="missing"):
        load_corpus(tmp_path, "en2de", "train", vocab)
    with pytest.raises(DataError):
        discover_pairs(tmp_path / "nowhere")


def test_files_match_in_memory_corpora(tmp_path):
    spec = _spec()
    pairs = write_synthetic(spec, tmp_path)
    assert discover_pairs(tmp_path) == sorted(pairs)
    vocab = build_vocab_from_dir(tmp_path, pairs)
    corpora = load_corpora(tmp_path, pairs, vocab)
    mem_vocab, mem = synthetic_corpora(spec)
    assert vocab == mem_vocab
    for pair in pairs:
        for split in ("train", "dev", "test"):
            assert corpora[pair][split].sources == mem[pair][split].sources
            assert corpora[pair][split].targets == mem[pair][split].targets
            corpora[pair][split].validate(len(vocab))


def test_corpus_validate_rejects_out_of_vocab(small_task):
    vocab, corpora = small_task
    with pytest.raises(DataError, match="outside"):
        corpora["src2cp"]["train"].validate(5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_splits_are_disjoint_for_any_seed(seed):
    data = generate_synthetic(_spec(seed=seed, sizes=(("train", 15), ("dev", 5), ("test", 5))))
    src = data["src2cp"]
    sets = [{tuple(s) for s in src[n][0]} for n in ("train", "dev", "test")]
    assert sum(len(s) for s in sets) == len(set().union(*sets))
