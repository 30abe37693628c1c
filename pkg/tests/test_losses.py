import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stnas import autodiff as ad
from stnas.autodiff import ContractError, Tensor
from stnas.checks import ctc_bruteforce, gradcheck, loss_checks, random_log_probs
from stnas.losses import (CtcBatch, CtcInfeasibleError, cross_entropy, ctc_greedy_decode, ctc_loss,
                          edit_distance, token_error_rate)


def test_uniform_cross_entropy_is_log_vocab(f64):
    loss = cross_entropy(Tensor(np.zeros((2, 3, 4))), np.zeros((2, 3), dtype=int))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-12)


def test_confident_correct_cross_entropy_near_zero(f64):
    logits = np.full((1, 2, 3), -50.0)
    logits[0, :, 1] = 50.0
    assert cross_entropy(Tensor(logits), np.ones((1, 2), dtype=int)).item() < 1e-30


def test_ctc_single_frame(f64):
    lp = np.log(np.array([[[0.2, 0.5, 0.3]]]))
    assert ctc_loss(CtcBatch(lp, [[1]])).item() == pytest.approx(-math.log(0.5), abs=1e-12)


def test_ctc_uniform_two_frames(f64):
    # paths collapsing to "a" over V=2: (a,a), (a,-), (-,a) -> 3/4
    lp = np.log(np.full((1, 2, 2), 0.5))
    assert ctc_loss(CtcBatch(lp, [[1]])).item() == pytest.approx(-math.log(0.75), abs=1e-12)


def test_ctc_repeat_needs_blank():
    lp = np.log(np.full((1, 2, 3), 1 / 3))
    with pytest.raises(CtcInfeasibleError):
        ctc_loss(CtcBatch(lp, [[1, 1]]))


def test_ctc_contract_errors():
    lp = np.log(np.full((1, 3, 3), 1 / 3))
    with pytest.raises(ContractError):
        CtcBatch(lp, [[0]])          # blank is not a label
    with pytest.raises(ContractError):
        CtcBatch(lp, [[1, 2, 1, 2]])  # longer than the input
    with pytest.raises(ContractError):
        CtcBatch(lp, [[1], [2]])      # batch mismatch


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(2, 4), st.lists(st.integers(1, 3), min_size=1, max_size=3),
       st.integers(0, 2 ** 31 - 1))
def test_ctc_matches_enumeration(T, V, labels, seed):
    labels = [min(c, V - 1) for c in labels]
    repeats = sum(a == b for a, b in zip(labels, labels[1:]))
    if len(labels) + repeats > T:
        return
    lp = random_log_probs(np.random.default_rng(seed), T, V)
    with ad.precision(64):
        got = ctc_loss(CtcBatch(lp[None], [labels])).item()
    assert abs(got - ctc_bruteforce(lp, labels)) <= 1e-10
    assert got >= 0


def test_ctc_batch_is_mean_and_respects_lengths(f64, rng):
    lp = np.stack([random_log_probs(rng, 5, 3) for _ in range(2)])
    both = ctc_loss(CtcBatch(lp, [[1, 2], [2]], input_lengths=[5, 3])).item()
    a = ctc_bruteforce(lp[0], [1, 2])
    b = ctc_bruteforce(lp[1, :3], [2])
    assert both == pytest.approx((a + b) / 2, abs=1e-10)


def test_ctc_gradient_checks(f64, rng):
    lp = random_log_probs(rng, 5, 4)
    err = gradcheck(lambda z: ctc_loss(CtcBatch(ad.log_softmax(z), [[1, 3]])), [lp[None].copy()])
    assert err <= 1e-4


def test_loss_check_suite(f64):
    for r in loss_checks(np.random.default_rng(0)):
        assert r.passed, r.line()


def test_greedy_decode_collapses_repeats_and_blanks():
    path = [0, 1, 1, 0, 1, 2, 2, 0]
    lp = np.full((1, len(path), 3), -10.0)
    lp[0, np.arange(len(path)), path] = 0.0
    assert ctc_greedy_decode(lp) == [[1, 1, 2]]


def test_edit_distance_and_rate():
    assert edit_distance([1, 2, 3], [1, 3]) == 1
    assert edit_distance([], [1, 2]) == 2
    assert token_error_rate([[1, 2]], [[1, 2, 3, 4]]) == pytest.approx(0.5)
