import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stnas import autodiff as ad
from stnas.autodiff import ContractError, Tensor
from stnas.checks import layer_checks
from stnas.nn import CandidateOpSpec, DenseLayer, TdnnLayer, TdnnUnit, dropout


def conv_loop(x, w, b, stride, dilation):
    """Per-frame reference: out[t] = b + sum_j x[t*s + (j-h)*d] @ w[j], zero outside."""
    B, T, _ = x.shape
    taps = w.shape[0]
    h = taps // 2
    t_out = -(-T // stride)
    out = np.zeros((B, t_out, w.shape[2]))
    for n in range(B):
        for t in range(t_out):
            acc = b.copy()
            for j in range(taps):
                src = t * stride + (j - h) * dilation
                if 0 <= src < T:
                    acc = acc + x[n, src] @ w[j]
            out[n, t] = acc
    return out


@pytest.mark.parametrize("h,d,s,T", [(0, 1, 1, 5), (1, 1, 1, 7), (1, 2, 1, 9), (2, 2, 1, 6),
                                      (1, 1, 3, 9), (3, 2, 2, 11), (2, 1, 3, 4)])
def test_tdnn_matches_loop_oracle(f64, rng, h, d, s, T):
    layer = TdnnLayer(3, 4, h, d, s, rng)
    x = rng.standard_normal((2, T, 3))
    out = layer(Tensor(x)).values
    np.testing.assert_allclose(out, conv_loop(x, layer.weight.values, layer.bias.values, s, d),
                               atol=1e-12)


def test_stride_three_output_length():
    layer = TdnnLayer(2, 3, 1, 1, 3)
    assert layer(Tensor(np.zeros((1, 9, 2)))).shape == (1, 3, 3)
    assert layer(Tensor(np.zeros((1, 10, 2)))).shape == (1, 4, 3)


def test_zero_context_equals_dense(f64, rng):
    tdnn = TdnnLayer(5, 3, 0, 1, 1, rng)
    dense = DenseLayer(5, 3)
    dense.weight.values = tdnn.weight.values[0].copy()
    dense.bias.values = tdnn.bias.values.copy()
    x = Tensor(rng.standard_normal((2, 6, 5)))
    np.testing.assert_allclose(tdnn(x).values, dense(x).values, atol=1e-12)


@pytest.mark.parametrize("h,d", [(1, 1), (1, 2), (2, 1), (2, 2), (3, 2)])
def test_parameter_count(h, d):
    layer = TdnnLayer(7, 5, h, d)
    assert layer.num_parameters() == (2 * h + 1) * 7 * 5 + 5
    assert layer.num_parameters() == sum(p.values.size for p in layer.parameters().values())


def test_candidate_labels_round_trip():
    for label in ("TDNN-1-1", "TDNN-1-2", "TDNN-2-1", "TDNN-2-2", "TDNN-3-2"):
        spec = CandidateOpSpec.parse(label)
        assert spec.label == label
        assert spec.half_width == spec.half_context * spec.dilation


def test_invalid_layers_rejected():
    with pytest.raises(ContractError):
        TdnnLayer(2, 2, -1)
    with pytest.raises(ContractError):
        TdnnLayer(2, 2, 1, 0)
    with pytest.raises(ContractError):
        TdnnLayer(3, 2)(Tensor(np.zeros((1, 4, 2))))
    with pytest.raises(ContractError):
        dropout(Tensor(np.ones(3)), 1.0, "train", np.random.default_rng(0))


def test_dropout_keep_rate_and_scale():
    x = Tensor(np.ones((1000, 1000)))
    y = dropout(x, 0.5, "train", np.random.default_rng(0)).values
    assert abs((y > 0).mean() - 0.5) <= 0.002
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) <= 0.004


def test_dropout_eval_is_identity(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    assert dropout(x, 0.5, "eval").values is x.values


def test_layer_checks_pass(f64):
    for r in layer_checks(np.random.default_rng(0)):
        assert r.passed, r.line()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 3), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_translation_equivariance(h, d, shift, seed):
    """Shifting the input by k frames shifts the output by k frames away from the padded edges."""
    rng = np.random.default_rng(seed)
    layer = TdnnLayer(2, 3, h, d, 1, rng)
    w = h * d
    T = 2 * w + shift + 6
    x = np.zeros((1, T + shift, 2))
    x[:, :T] = rng.standard_normal((1, T, 2))
    with ad.precision(64):
        a = layer(Tensor(x[:, :T])).values
        b = layer(Tensor(np.roll(x, shift, axis=1))).values
    lo, hi = w, T - w
    np.testing.assert_allclose(b[:, lo + shift:hi + shift], a[:, lo:hi], atol=1e-10)


def test_unit_eval_is_deterministic(rng):
    unit = TdnnUnit(3, 4, 1, 1, 1, 0.5, rng)
    x = Tensor(rng.standard_normal((2, 5, 3)))
    np.testing.assert_array_equal(unit(x).values, unit(x).values)
