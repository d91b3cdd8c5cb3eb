from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import PAIRS, toy_batch
from neuron_alloc.errors import DataError, UsageError
from neuron_alloc.importance import (
    ImportanceTable, accumulate_batch, criterion_contribution, finalize, finalized_table, mean_importance,
    merge, new_table,
)
from neuron_alloc.masks import NeuronSiteRegistry
from neuron_alloc.model import make_batch
from neuron_alloc.tensor import Tensor, add, backward, mul, relu, scale
from oracles import activation_sums, taylor_oracle


def _one_neuron():
    w = Tensor(np.array([1.0]), requires_grad=True)
    x = Tensor(np.array([1.0]))
    h = relu(mul(w, x)).retain_grad()
    d = add(scale(h, 2.0), Tensor(np.array([-1.0])))
    backward(mul(d, d))
    return h


def test_one_neuron_taylor_and_magnitude():
    h = _one_neuron()
    assert h.grad[0] == 4.0
    assert criterion_contribution("te", h.data[None], h.grad[None])[0] == 4.0
    assert criterion_contribution("av", h.data[None], None)[0] == 1.0


def test_zero_activations_contribute_nothing():
    h = np.zeros((3, 4))
    g = np.ones((3, 4))
    assert not criterion_contribution("te", h, g).any()
    assert not criterion_contribution("av", h, None).any()


def test_contribution_errors():
    with pytest.raises(UsageError):
        criterion_contribution("te", np.ones((1, 2)), None)
    with pytest.raises(UsageError):
        criterion_contribution("fisher", np.ones((1, 2)), None)


def test_taylor_sums_match_finite_difference_oracle(tiny_model64):
    b = toy_batch()
    table = new_table(tiny_model64, "te")
    accumulate_batch(tiny_model64, b, "src2cp", "te", table)
    ref = taylor_oracle(tiny_model64.state_dict(), tiny_model64.config, b.src, b.tgt_in, b.tgt_out)
    got = table.accumulated()[0]
    for g in tiny_model64.registry.groups:
        np.testing.assert_allclose(got[g.slice], ref[g.key], rtol=1e-5, atol=1e-9)


def test_magnitude_sums_match_oracle(tiny_model64):
    b = toy_batch("src2rv")
    table = new_table(tiny_model64, "av")
    accumulate_batch(tiny_model64, b, "src2rv", "av", table)
    ref = activation_sums(tiny_model64.state_dict(), tiny_model64.config, b.src, b.tgt_in, b.tgt_out)
    got = table.accumulated()[1]
    for g in tiny_model64.registry.groups:
        np.testing.assert_allclose(got[g.slice], ref[g.key], rtol=1e-10)
    assert table.counts.tolist() == [0, b.num_target_tokens, 0]


def test_accumulation_leaves_parameters_and_grads_alone(tiny_model):
    before = tiny_model.state_dict()
    table = new_table(tiny_model, "te")
    accumulate_batch(tiny_model, toy_batch(), "src2cp", "te", table)
    after = tiny_model.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)
    assert all(p.grad is None for p in tiny_model.parameters())


def test_finalize_divides_by_token_count():
    reg = NeuronSiteRegistry([("encoder", 1, "ffn_inner", 1)])
    table = ImportanceTable("av", ("a2b",), reg)
    table.add("a2b", np.array([0.5]), 1)
    table.add("a2b", np.array([1.5]), 1)
    finalize(table)
    assert table.scores[0, 0] == 1.0
    with pytest.raises(UsageError):
        finalize(table)
    with pytest.raises(UsageError):
        table.add("a2b", np.array([1.0]), 1)
    with pytest.raises(ValueError):
        table.scores[0, 0] = 2.0


def test_finalize_names_empty_pair(tiny_model):
    table = new_table(tiny_model, "av")
    accumulate_batch(tiny_model, toy_batch(), "src2cp", "av", table)
    with pytest.raises(DataError, match="src2rv"):
        finalize(table)


def test_accumulate_errors(tiny_model):
    table = new_table(tiny_model, "av")
    with pytest.raises(UsageError, match="criterion"):
        accumulate_batch(tiny_model, toy_batch(), "src2cp", "te", table)
    with pytest.raises(DataError):
        accumulate_batch(tiny_model, toy_batch("src2rv"), "src2cp", "av", table)
    with pytest.raises(DataError):
        accumulate_batch(tiny_model, toy_batch("src2xx"), "src2xx", "av", table)


def test_identical_data_gives_identical_rows(tiny_model):
    table = new_table(tiny_model, "te")
    for pair in PAIRS:
        accumulate_batch(tiny_model, toy_batch(pair, lang=3), pair, "te", table)
    finalize(table)
    assert table.scores[0].tobytes() == table.scores[1].tobytes() == table.scores[2].tobytes()


def _batches():
    sources = [[3, 5, 6], [3, 7], [3, 8, 9, 10], [3, 11], [3, 12, 13]]
    targets = [[5, 6], [7, 7, 7], [8, 9, 10], [11], [13, 12]]
    return [make_batch("src2cp", [s], [t]) for s, t in zip(sources, targets)]


def test_accumulation_is_order_independent(tiny_model):
    batches = _batches()
    tables = []
    for order in ([0, 1, 2, 3, 4], [4, 2, 0, 3, 1], [3, 4, 1, 0, 2]):
        t = new_table(tiny_model, "te", pairs=("src2cp",))
        for i in order:
            accumulate_batch(tiny_model, batches[i], "src2cp", "te", t)
        tables.append(finalize(t))
    assert tables[0].scores.tobytes() == tables[1].scores.tobytes() == tables[2].scores.tobytes()
    assert tables[0].fingerprint() == tables[2].fingerprint()


def test_merge_equals_sequential(tiny_model):
    batches = _batches()
    whole = new_table(tiny_model, "av", pairs=("src2cp",))
    left = new_table(tiny_model, "av", pairs=("src2cp",))
    right = new_table(tiny_model, "av", pairs=("src2cp",))
    for i, b in enumerate(batches):
        accumulate_batch(tiny_model, b, "src2cp", "av", whole)
        accumulate_batch(tiny_model, b, "src2cp", "av", left if i % 2 else right)
    merged = finalize(merge([right, left]))
    finalize(whole)
    assert merged.scores.tobytes() == whole.scores.tobytes()
    assert merged.counts.tolist() == whole.counts.tolist()
    with pytest.raises(UsageError):
        merge([whole])


def test_mean_importance():
    reg = NeuronSiteRegistry([("encoder", 1, "ffn_inner", 1)])
    t = finalized_table("te", ("a2b", "a2c"), reg, [[0.2], [0.6]])
    assert mean_importance(t)[0] == pytest.approx(0.4)
    same = finalized_table("te", ("a2b", "a2c"), reg, [[0.3], [0.3]])
    assert mean_importance(same)[0] == 0.3
    single = finalized_table("te", ("a2b",), reg, [[0.7]])
    assert mean_importance(single)[0] == 0.7
    with pytest.raises(DataError):
        finalized_table("te", ("a2b",), reg, [[-0.1]])


@settings(max_examples=50, deadline=None)
@given(st.integers(-6, 6), st.floats(0.01, 100.0))
def test_magnitude_scales_with_activations(exp, c):
    rng = np.random.default_rng(0)
    h = rng.standard_normal((4, 7, 5))
    power = 2.0 ** exp
    base = criterion_contribution("av", h, None)
    assert (criterion_contribution("av", h * power, None) == base * power).all()
    np.testing.assert_allclose(criterion_contribution("av", h * c, None), base * c, rtol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=6))
def test_scores_are_nonnegative(values):
    h = np.array(values)[None]
    g = -np.ones_like(h)
    assert (criterion_contribution("te", h - 5.0, g) >= 0).all()
    assert (criterion_contribution("av", h - 5.0, None) >= 0).all()
