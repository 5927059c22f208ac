import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agcnet import gradcheck
from agcnet.layers import (
    AgcParams,
    BatchNormState,
    PoolIndices,
    agc_backward,
    agc_forward,
    batchnorm_forward,
    conv2d,
    conv2d_forward,
    maxpool2x2_forward,
    relu,
    unpool2x2_forward,
    weighted_softmax_xent,
)
from agcnet.tensor import Tape, Tensor, reduce_sum

seeds = st.integers(0, 2**32 - 1)
extent = st.integers(1, 6)
even_extent = st.sampled_from([2, 4, 6])


def conv_oracle(x, w, pad):
    """Direct nested-loop cross-correlation."""
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    out = np.zeros((n, oc, ho, wo))
    for s in range(n):
        for o in range(oc):
            for i in range(ho):
                for j in range(wo):
                    out[s, o, i, j] = np.sum(xp[s, :, i:i + kh, j:j + kw] * w[o])
    return out


# --------------------------------------------------------------------------
# conv2d

def test_conv_valid_hand_example():
    x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    w = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 1, 2, 2)
    out, _ = conv2d_forward(x, w, padding="valid")
    assert np.array_equal(out[0, 0], [[6, 8], [12, 14]])


def test_conv_unit_kernel_is_identity():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 4))
    w = np.eye(3).reshape(3, 3, 1, 1)
    out, _ = conv2d_forward(x, w)
    assert np.array_equal(out, x)


def test_conv_zero_kernel():
    x = np.random.default_rng(1).standard_normal((1, 2, 4, 4))
    out, _ = conv2d_forward(x, np.zeros((3, 2, 3, 3)))
    assert np.array_equal(out, np.zeros((1, 3, 4, 4)))


def test_conv_channel_mismatch():
    with pytest.raises(ValueError):
        conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((3, 4, 3, 3)))


@settings(max_examples=20, deadline=None)
@given(seed=seeds, n=st.integers(1, 3), c=st.integers(1, 3), h=extent, w=extent)
def test_conv_matches_loop_oracle(seed, n, c, h, w):
    rng = np.random.default_rng(seed)
    x, k = rng.standard_normal((n, c, h, w)), rng.standard_normal((2, c, 3, 3))
    out, _ = conv2d_forward(x, k)
    assert np.allclose(out, conv_oracle(x, k, 1), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=seeds, n=st.integers(1, 3), c=st.integers(1, 3), h=extent, w=extent,
       oc=st.integers(1, 3), k=st.sampled_from([1, 3]))
def test_conv_gradients(seed, n, c, h, w, oc, k):
    errs = gradcheck.check_conv(np.random.default_rng(seed), (n, c, h, w), oc, k)
    assert max(errs.values()) < 1e-4, errs


# --------------------------------------------------------------------------
# AGC

def test_agc_forward_hand_example():
    z = np.array([1.0, 2, 3, 4]).reshape(1, 1, 2, 2)
    out = agc_forward(z, [1.0], [2.0], [0.5])
    assert np.array_equal(out.reshape(-1), [-2.5, -0.5, 1.5, 3.5])


def test_agc_identity_parameters():
    z = np.random.default_rng(2).standard_normal((3, 4, 5, 5))
    out = agc_forward(z, np.zeros(4), np.ones(4), np.zeros(4))
    assert np.max(np.abs(out - z)) <= 1e-15


@given(seed=seeds, gamma=st.floats(-5, 5))
def test_agc_full_mean_subtraction_zero_mean(seed, gamma):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((2, 3, 4, 4)) * 3 + 10
    out = agc_forward(z, np.ones(3), np.full(3, gamma), np.zeros(3))
    assert np.max(np.abs(out.mean(axis=(2, 3)))) <= 1e-6


@given(seed=seeds)
def test_agc_is_per_sample(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((5, 2, 3, 4))
    lam, gamma, beta = rng.standard_normal(2), rng.standard_normal(2), rng.standard_normal(2)
    perm = rng.permutation(5)
    assert np.array_equal(agc_forward(z[perm], lam, gamma, beta), agc_forward(z, lam, gamma, beta)[perm])


def test_agc_does_not_divide_by_std():
    z = np.array([0.0, 0, 0, 8]).reshape(1, 1, 2, 2)
    out = agc_forward(z, [1.0], [1.0], [0.0])
    assert np.array_equal(out.reshape(-1), [-2, -2, -2, 6])


def test_agc_backward_hand_example():
    z = np.array([1.0, 2, 3, 4]).reshape(1, 1, 2, 2)
    g = np.array([1.0, 0, 0, 0]).reshape(1, 1, 2, 2)
    gz, glam, ggam, gbeta = agc_backward(z, [1.0], [1.0], [0.0], g)
    assert np.allclose(gz.reshape(-1), [0.75, -0.25, -0.25, -0.25], atol=1e-15)
    assert np.allclose([glam[0], ggam[0], gbeta[0]], [-2.5, -1.5, 1.0], atol=1e-15)
    # the same values from the finite-difference oracle
    num = gradcheck.numeric_gradients(
        lambda t: reduce_sum(Tensor(agc_forward(t["z"].data, t["l"].data, t["g"].data, t["b"].data)) * Tensor(g)),
        {"z": z, "l": np.array([1.0]), "g": np.array([1.0]), "b": np.array([0.0])})
    assert np.allclose(num["z"].reshape(-1), [0.75, -0.25, -0.25, -0.25], atol=1e-9)
    assert np.allclose([num["l"][0], num["g"][0], num["b"][0]], [-2.5, -1.5, 1.0], atol=1e-9)


def test_agc_backward_zero_grad():
    z = np.random.default_rng(3).standard_normal((2, 2, 3, 3))
    grads = agc_backward(z, np.ones(2), np.ones(2), np.zeros(2), np.zeros_like(z))
    assert all(np.all(g == 0) for g in grads)


def test_agc_backward_lambda_zero():
    rng = np.random.default_rng(4)
    z, g = rng.standard_normal((2, 3, 3, 3)), rng.standard_normal((2, 3, 3, 3))
    gamma = rng.standard_normal(3)
    gz, *_ = agc_backward(z, np.zeros(3), gamma, np.zeros(3), g)
    assert np.array_equal(gz, gamma.reshape(1, 3, 1, 1) * g)


def test_agc_rejects_bad_parameters():
    z = np.zeros((1, 2, 2, 2))
    with pytest.raises(ValueError):
        agc_forward(z, [1.0, np.nan], [1.0, 1.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        agc_forward(z, [1.0], [1.0], [0.0])
    with pytest.raises(ValueError):
        agc_backward(z, np.ones(2), np.ones(2), np.zeros(2), np.zeros((1, 2, 2, 3)))
    with pytest.raises(ValueError):
        AgcParams(np.zeros((2, 1, 3, 3)), np.ones(3), np.ones(2), np.zeros(2))


@settings(max_examples=50, deadline=None)
@given(seed=seeds, shape=st.tuples(extent, extent, extent, extent))
def test_agc_gradients(seed, shape):
    errs = gradcheck.check_agc(np.random.default_rng(seed), shape)
    assert max(errs.values()) < 1e-4, errs


# --------------------------------------------------------------------------
# batch norm

def test_batchnorm_hand_example():
    z = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    state = BatchNormState.fresh(1, dtype=np.float64)
    out, _ = batchnorm_forward(z, [2.0], [1.0], state, "train", eps=0.0)
    assert np.array_equal(out.reshape(-1), [-1.0, 3.0])


def test_batchnorm_constant_input_gives_shift():
    z = np.full((3, 2, 4, 4), 5.0)
    state = BatchNormState.fresh(2, dtype=np.float64)
    out, _ = batchnorm_forward(z, [2.0, 3.0], [0.25, -1.0], state, "train")
    assert np.allclose(out[:, 0], 0.25) and np.allclose(out[:, 1], -1.0)


def test_batchnorm_running_stats():
    z = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    state = BatchNormState.fresh(1, dtype=np.float64)
    batchnorm_forward(z, [1.0], [0.0], state, "train")
    assert np.allclose(state.running_mean, 0.9 * 0 + 0.1 * 2.0)
    assert np.allclose(state.running_var, 0.9 * 1 + 0.1 * 1.0)
    out, _ = batchnorm_forward(z, [1.0], [0.0], state, "infer")
    assert np.allclose(out.reshape(-1), (np.array([1.0, 3.0]) - 0.2) / np.sqrt(1.0 + 1e-5))


def test_batchnorm_state_invariants():
    with pytest.raises(ValueError):
        BatchNormState(np.zeros(1), np.array([-1.0]))
    with pytest.raises(ValueError):
        BatchNormState(np.zeros(1), np.ones(1), epsilon=0.0)


@given(seed=seeds)
def test_batchnorm_minibatch_one_is_response_normalisation(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((1, 3, 5, 4)) * 2 + 1
    scale, shift = rng.standard_normal(3), rng.standard_normal(3)
    out, _ = batchnorm_forward(z, scale, shift, BatchNormState.fresh(3, dtype=np.float64), "train")
    ref = np.empty_like(z)
    for c in range(3):
        m = z[0, c]
        ref[0, c] = (m - m.mean()) / np.sqrt(((m - m.mean()) ** 2).mean() + 1e-5) * scale[c] + shift[c]
    assert np.max(np.abs(out - ref)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(seed=seeds, shape=st.tuples(st.integers(1, 4), extent, st.integers(2, 6), extent))
def test_batchnorm_gradients(seed, shape):
    errs = gradcheck.check_batchnorm(np.random.default_rng(seed), shape)
    assert max(errs.values()) < 1e-4, errs


# --------------------------------------------------------------------------
# ReLU

def test_relu_values_and_gradient():
    z = Tensor(np.array([-1.0, 0.0, 2.0]))
    with Tape() as tape:
        tape.watch(z)
        out = relu(z)
        loss = reduce_sum(out)
    assert np.array_equal(out.data, [0, 0, 2])
    assert np.array_equal(tape.backward(loss)[z], [0, 0, 1])


def test_relu_all_negative():
    z = Tensor(-np.arange(1.0, 5.0))
    with Tape() as tape:
        tape.watch(z)
        loss = reduce_sum(relu(z))
    assert loss.item() == 0
    assert np.array_equal(tape.backward(loss)[z], np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(seed=seeds, shape=st.tuples(extent, extent, extent, extent))
def test_relu_gradients(seed, shape):
    assert max(gradcheck.check_relu(np.random.default_rng(seed), shape).values()) < 1e-4


# --------------------------------------------------------------------------
# pooling

def test_maxpool_hand_example():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    y, idx = maxpool2x2_forward(x)
    assert y.reshape(-1).tolist() == [4.0]
    assert idx.offsets.reshape(-1).tolist() == [3]
    assert np.array_equal(unpool2x2_forward(y, idx)[0, 0], [[0, 0], [0, 4]])


def test_maxpool_ties_take_lowest_offset():
    x = np.array([[0.0, 5.0, 7.0, 7.0], [5.0, 5.0, 7.0, 7.0]]).reshape(1, 1, 2, 4)
    _, idx = maxpool2x2_forward(x)
    assert idx.offsets.reshape(-1).tolist() == [1, 2]


@given(seed=seeds, h=even_extent, w=even_extent)
def test_unpool_of_pool_keeps_argmax_cells(seed, h, w):
    x = np.random.default_rng(seed).standard_normal((2, 3, h, w))
    y, idx = maxpool2x2_forward(x)
    up = unpool2x2_forward(y, idx)
    mask = np.zeros(x.shape, dtype=bool)
    flat = mask.reshape(2, 3, -1)
    np.put_along_axis(flat, idx.offsets.reshape(2, 3, -1), True, axis=-1)
    assert np.array_equal(up[mask], x[mask])
    assert np.all(up[~mask] == 0)
    # exactly one kept cell per window
    assert np.array_equal(mask.reshape(2, 3, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),
                          np.ones((2, 3, h // 2, w // 2), dtype=int))


def test_pool_rejects_odd_extent():
    with pytest.raises(ValueError):
        maxpool2x2_forward(np.zeros((1, 1, 3, 4)))


def test_unpool_rejects_corrupted_indices():
    _, idx = maxpool2x2_forward(np.random.default_rng(0).standard_normal((1, 1, 4, 4)))
    bad = idx.offsets.copy()
    bad[0, 0, 0, 0] = 15  # lives in the bottom-right window
    with pytest.raises(ValueError):
        PoolIndices(bad, (4, 4))
    bad[0, 0, 0, 0] = -1
    with pytest.raises(ValueError):
        PoolIndices(bad, (4, 4))


@settings(max_examples=50, deadline=None)
@given(seed=seeds, shape=st.tuples(extent, extent, even_extent, even_extent))
def test_pool_unpool_gradients(seed, shape):
    assert max(gradcheck.check_pool(np.random.default_rng(seed), shape).values()) < 1e-4


# --------------------------------------------------------------------------
# weighted softmax cross-entropy

def test_xent_uniform_two_class():
    loss, _ = weighted_softmax_xent(np.zeros((1, 2, 1, 1)), np.zeros((1, 1, 1), int), [1.0, 1.0])
    assert loss == pytest.approx(np.log(2), abs=1e-15)


def test_xent_confident_correct():
    logits = np.array([50.0, -50.0]).reshape(1, 2, 1, 1)
    loss, _ = weighted_softmax_xent(logits, np.zeros((1, 1, 1), int), [1.0, 1.0])
    assert 0 <= loss < 1e-20


def test_xent_weights_and_ignore():
    logits = np.zeros((1, 2, 1, 3))
    labels = np.array([[[0, 1, 255]]])
    loss, grad = weighted_softmax_xent(logits, labels, [0.5, 1.5])
    assert loss == pytest.approx((0.5 + 1.5) * np.log(2) / 2)
    assert np.all(grad[..., 2] == 0)


def test_xent_label_out_of_range():
    with pytest.raises(ValueError):
        weighted_softmax_xent(np.zeros((1, 2, 1, 1)), np.full((1, 1, 1), 2), [1.0, 1.0])


def test_xent_warns_on_unnormalised_weights():
    with pytest.warns(UserWarning):
        weighted_softmax_xent(np.zeros((1, 2, 1, 1)), np.zeros((1, 1, 1), int), [3.0, 3.0])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        weighted_softmax_xent(np.zeros((1, 2, 1, 1)), np.zeros((1, 1, 1), int), [0.5, 1.5])


@given(seed=seeds, k=st.integers(2, 6))
def test_xent_gradient_sums_to_zero_over_classes(seed, k):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((2, k, 3, 3)) * 3
    labels = rng.integers(0, k, (2, 3, 3))
    w = rng.uniform(0.1, 2, k)
    _, grad = weighted_softmax_xent(logits, labels, w * k / w.sum())
    assert np.max(np.abs(grad.sum(axis=1))) <= 1e-10


@settings(max_examples=50, deadline=None)
@given(seed=seeds, shape=st.tuples(extent, st.integers(2, 6), extent, extent))
def test_xent_gradients(seed, shape):
    assert max(gradcheck.check_xent(np.random.default_rng(seed), shape).values()) < 1e-4


def test_conv_op_records_on_tape():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    with Tape() as tape:
        tape.watch(w)
        loss = reduce_sum(conv2d(x, w))
    gw = tape.backward(loss)[w]
    # each weight sees the 3x3 ones map with zero padding: 4, 6, 4 / 6, 9, 6 / 4, 6, 4
    assert np.array_equal(gw[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])
