from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import PAIRS, tiny_config
from neuron_alloc.allocation import AllocationPlan
from neuron_alloc.analysis import (
    bleu, bleu_statistics, distribution_tsv, erase_population, erase_random, exact_match_accuracy,
    export_importance_distribution, lscore, lscore_matrix, mscore, mscore_matrix, parse_target, structure_report,
)
from neuron_alloc.errors import DataError, UsageError
from neuron_alloc.importance import finalized_table
from neuron_alloc.masks import NeuronSiteRegistry, build_mask_set, enumerate_sites


def _s(text):
    return text.split()


# -- BLEU ---------------------------------------------------------------------

def test_bleu_identity_is_100():
    corpus = [_s("a b c d e"), _s("the cat sat on the mat")]
    assert bleu(corpus, corpus) == 100.0


def test_bleu_smoothed_zero_orders():
    # p1 = 2/4, p2 = 1/3, p3 = 1/(2*2), p4 = 1/(4*1)
    got = bleu([_s("the the the cat")], [_s("the cat sat down")])
    assert round(got, 4) == round(100 * (1 / 96) ** 0.25, 4) == 31.9472


def test_bleu_brevity_penalty():
    got = bleu([_s("a b c d")], [_s("a b c d e f")])
    assert round(got, 4) == round(100 * math.exp(1 - 6 / 4), 4) == 60.6531


def test_bleu_two_sentence_corpus_pools_counts():
    hyps = [_s("a b c d e"), _s("x y z w")]
    refs = [_s("a b c d e"), _s("x y q w")]
    # p1 = 8/9, p2 = 5/7, p3 = 3/5, p4 = 2/3
    got = bleu(hyps, refs)
    assert round(got, 4) == round(100 * (8 / 9 * 5 / 7 * 3 / 5 * 2 / 3) ** 0.25, 4) == 70.9896


def test_bleu_disjoint_corpus():
    # every order smoothed: 1/(2*4), 1/(4*3), 1/(8*2), 1/(16*1)
    got = bleu([_s("a b c d")], [_s("e f g h")])
    assert round(got, 4) == round(100 * (1 / 24576) ** 0.25, 4) == 7.9868


def test_bleu_without_four_grams_is_zero():
    assert bleu([_s("a a b")], [_s("a b b c")]) == 0.0
    assert bleu([[]], [_s("a b")]) == 0.0


def test_bleu_statistics_clip_counts():
    matches, totals, hyp_len, ref_len = bleu_statistics([_s("a a b")], [_s("a b b c")])
    assert matches == [2, 1, 0, 0]
    assert totals == [3, 2, 1, 0]
    assert (hyp_len, ref_len) == (3, 4)


def test_bleu_errors():
    with pytest.raises(DataError):
        bleu([_s("a")], [])
    with pytest.raises(DataError):
        bleu([], [])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abcde"), min_size=4, max_size=9), min_size=1, max_size=5),
       st.lists(st.lists(st.sampled_from("abcde"), min_size=4, max_size=9), min_size=1, max_size=5))
def test_bleu_bounds(hyps, refs):
    n = min(len(hyps), len(refs))
    score = bleu(hyps[:n], refs[:n])
    assert 0.0 <= score <= 100.0
    assert bleu(refs[:n], refs[:n]) == 100.0


def test_exact_match_accuracy():
    assert exact_match_accuracy([[1, 2], [3]], [[1, 2], [4]]) == 0.5
    with pytest.raises(DataError):
        exact_match_accuracy([], [])


# -- structure metrics --------------------------------------------------------

def _hand_plan():
    reg = NeuronSiteRegistry([("encoder", 1, "self_attn_out", 2), ("encoder", 1, "ffn_inner", 4)])
    roles = (None, ("a2b",), ("a2b", "a2c"), ("a2c",), None, ("a2b",))
    return AllocationPlan(("a2b", "a2c"), reg, roles)


def test_lscore_hand_counts():
    plan = _hand_plan()
    # four specific neurons in the layer: a2b holds three, a2c two
    assert lscore(plan, "encoder", 1, "a2b") == 0.75
    assert lscore(plan, "encoder", 1, "a2c") == 0.5


def test_mscore_hand_counts():
    plan = _hand_plan()
    assert mscore(plan, "encoder", 1, "self_attn_out") == 0.5
    assert mscore(plan, "encoder", 1, "ffn_inner") == pytest.approx(2 / 3, abs=0)


def test_structure_errors_and_matrices():
    plan = _hand_plan()
    with pytest.raises(DataError):
        lscore(plan, "encoder", 1, "a2z")
    with pytest.raises(DataError, match="no specific"):
        lscore(plan, "encoder", 2, "a2b")
    assert lscore_matrix(plan, "encoder") == {1: {"a2b": 0.75, "a2c": 0.5}}
    assert mscore_matrix(plan, "encoder")[1]["self_attn_out"] == 0.5
    all_general = AllocationPlan(("a2b",), plan.registry, (None,) * 6)
    assert lscore_matrix(all_general, "encoder") == {1: {"a2b": None}}
    report = structure_report(plan).to_dict()
    assert report["plan"]["per_pair"] == {"a2b": 3, "a2c": 2}
    assert report["lscore"]["encoder"]["1"] == {"a2b": 0.75, "a2c": 0.5}


role_choices = st.sampled_from([None, ("a2b",), ("a2c",), ("a2d",), ("a2b", "a2c"), ("a2b", "a2c", "a2d")])


@settings(max_examples=80, deadline=None)
@given(st.lists(role_choices, min_size=6, max_size=6))
def test_structure_metric_bounds(roles):
    reg = NeuronSiteRegistry([("decoder", 1, "cross_attn_out", 3), ("decoder", 1, "ffn_inner", 3)])
    plan = AllocationPlan(("a2b", "a2c", "a2d"), reg, tuple(roles))
    if all(r is None for r in roles):
        return
    scores = [lscore(plan, "decoder", 1, p) for p in plan.pairs]
    assert all(0.0 <= s <= 1.0 for s in scores)
    # the shares sum to >= 1 exactly; compare counts to avoid float rounding (4/6 + 1/6 + 1/6)
    n = sum(r is not None for r in roles)
    assert sum(round(s * n) for s in scores) >= n
    for site in ("cross_attn_out", "ffn_inner"):
        value = mscore_matrix(plan, "decoder")[1][site]
        assert value is None or 0.0 <= value <= 1.0


# -- erasure ------------------------------------------------------------------

def _tiny_plan():
    cfg = tiny_config()
    reg = enumerate_sites(cfg)
    rng = np.random.default_rng(4)
    choices = [None, None, None, ("src2cp",), ("src2rv",), ("src2sh",), ("src2cp", "src2sh")]
    roles = tuple(choices[int(i)] for i in rng.integers(0, len(choices), size=len(reg)))
    plan = AllocationPlan(PAIRS, reg, roles)
    return cfg, plan, build_mask_set(plan, cfg)


def test_parse_target():
    assert parse_target("general") == ("general", None)
    assert parse_target("specific:src2cp") == ("specific", "src2cp")
    for bad in ("specific:", "special", ""):
        with pytest.raises(UsageError):
            parse_target(bad)


def test_erase_general_count_and_scope():
    _, plan, masks = _tiny_plan()
    population = erase_population(plan, "general")
    erased = erase_random(masks, plan, "general", 0.2, seed=0)
    expected = math.floor(0.2 * population.size + 0.5)
    reg = plan.registry
    before = masks["src2cp"].as_vector(reg)
    after = erased["src2cp"].as_vector(reg)
    zeroed = np.nonzero(before != after)[0]
    assert zeroed.size == expected
    assert set(zeroed) <= set(population)
    for pair in PAIRS:
        diff = np.nonzero(masks[pair].as_vector(reg) != erased[pair].as_vector(reg))[0]
        assert diff.tolist() == zeroed.tolist()
    assert "erase general" in erased.note


def test_erase_specific_touches_only_that_pairs_neurons():
    _, plan, masks = _tiny_plan()
    reg = plan.registry
    erased = erase_random(masks, plan, "specific:src2rv", 0.5, seed=1)
    owned = set(np.nonzero(plan.assigned("src2rv"))[0])
    removed = set(np.nonzero(masks["src2rv"].as_vector(reg) != erased["src2rv"].as_vector(reg))[0])
    assert removed <= owned
    assert len(removed) == math.floor(0.5 * len(owned) + 0.5)
    assert erased["src2cp"].as_vector(reg)[plan.is_general()].all()


def test_erase_is_seeded():
    _, plan, masks = _tiny_plan()
    a = erase_random(masks, plan, "general", 0.3, seed=5)
    b = erase_random(masks, plan, "general", 0.3, seed=5)
    c = erase_random(masks, plan, "general", 0.3, seed=6)
    assert a == b
    assert a != c


def test_erase_fraction_extremes_and_errors():
    cfg, plan, masks = _tiny_plan()
    reg = plan.registry
    none = erase_random(masks, plan, "general", 0.0, seed=0)
    assert all((none[p].as_vector(reg) == masks[p].as_vector(reg)).all() for p in PAIRS)
    everything = erase_random(masks, plan, "general", 1.0, seed=0)
    assert not everything["src2sh"].as_vector(reg)[plan.is_general()].any()
    with pytest.raises(UsageError):
        erase_random(masks, plan, "general", 1.5, seed=0)
    with pytest.raises(DataError, match="unknown pair"):
        erase_random(masks, plan, "specific:src2xx", 0.5, seed=0)
    other = AllocationPlan(PAIRS, reg, (None,) * len(reg))
    with pytest.raises(DataError, match="not built"):
        erase_random(masks, other, "general", 0.5, seed=0)
    with pytest.raises(DataError, match="no neurons"):
        erase_random(build_mask_set(other, cfg), other, "specific:src2cp", 0.5, seed=0)


# -- distributions --------------------------------------------------------------

def test_distribution_export_round_trip():
    reg = NeuronSiteRegistry([("encoder", 1, "ffn_inner", 3), ("decoder", 1, "ffn_inner", 2)])
    scores = np.array([[0.1, 0.25, 1 / 3, 9.0, 0.0], [2.5, 1e-12, 7.0, 0.5, 0.125]])
    table = finalized_table("te", ("a2b", "a2c"), reg, scores)
    series = export_importance_distribution(table, "decoder", 1, "ffn_inner")
    assert series == {"a2b": [(0, 9.0), (1, 0.0)], "a2c": [(0, 0.5), (1, 0.125)]}
    text = distribution_tsv(export_importance_distribution(table, "encoder", 1, "ffn_inner"))
    rows = [line.split("\t") for line in text.strip().split("\n")]
    assert rows[0] == ["unit", "a2b", "a2c"]
    parsed = np.array([[float(v) for v in row[1:]] for row in rows[1:]]).T
    assert parsed.tobytes() == scores[:, :3].tobytes()
    only = export_importance_distribution(table, "encoder", 1, "ffn_inner", pairs=["a2c"])
    assert list(only) == ["a2c"]
