import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import rnn_gradient_check
from oracles import lstm_naive, numeric_grad, rel_err
from primkit.errors import InvalidShape, LayoutNotDescending, ShapeMismatch
from primkit.rnn import (
    RnnBiasMode,
    RnnCell,
    RnnDescriptor,
    RnnDirection,
    RnnInputMode,
    RnnWeights,
    SeqBatchLayout,
    init_weights,
    lstm_backward_data,
    lstm_backward_weights,
    lstm_forward,
    rnn_backward_data,
    rnn_backward_weights,
    rnn_forward,
    vanilla_rnn_backward,
    vanilla_rnn_forward,
)
from primkit.tensor import OpCounters

LSTM = RnnCell.LSTM
# hand walk of the gate equations with plain math for the scalar case below
SCALAR_H1 = 0.21352660684512006
SCALAR_C1 = 0.34362803165157835


def lstm_desc(hidden, **kw):
    return RnnDescriptor(LSTM, hidden, **kw)


class TestLayout:
    def test_increasing_sizes_rejected(self):
        with pytest.raises(LayoutNotDescending):
            SeqBatchLayout((2, 3, 1))

    def test_rejected_before_compute(self):
        desc = lstm_desc(2)
        w = init_weights(desc, 2, np.random.default_rng(0))[0][0]
        counters = OpCounters()
        with pytest.raises(LayoutNotDescending):
            lstm_forward(desc, w, np.zeros((3, 3, 2)), SeqBatchLayout([1, 2, 3]), counters=counters)
        assert counters.gemm_calls == 0

    @pytest.mark.parametrize("sizes", [(), (2, 0)])
    def test_empty_steps_rejected(self, sizes):
        with pytest.raises(InvalidShape):
            SeqBatchLayout(sizes)

    def test_pack_unpack(self, rng):
        layout = SeqBatchLayout((3, 2, 2, 1))
        x = rng.standard_normal((4, 3, 2))
        rows = layout.pack(x)
        assert rows.shape == (8, 2)
        back = layout.unpack(rows, 3)
        assert back[3, 1:].sum() == 0 and np.array_equal(back[0], x[0]) and np.array_equal(back[3, 0], x[3, 0])


class TestLstmForward:
    def test_zero_weights(self):
        desc = lstm_desc(2, bias_mode=RnnBiasMode.NO_BIAS)
        w = RnnWeights(np.zeros((8, 3)), np.zeros((8, 2)))
        c0 = np.array([[[1.0, -2.0]]])
        out = lstm_forward(desc, w, np.ones((3, 1, 3)), c0=c0)
        c = c0[0, 0]
        for t in range(3):
            c = 0.5 * c
            np.testing.assert_allclose(out.y[t, 0], 0.5 * np.tanh(c), rtol=1e-15)
        np.testing.assert_allclose(out.c_n[0, 0], c, rtol=1e-15)

    def test_scalar_walk(self):
        desc = lstm_desc(1)
        w = RnnWeights(np.array([[0.5], [-0.3], [0.8], [0.2]]), np.array([[0.1], [0.2], [-0.4], [0.6]]),
                       np.array([0.05, -0.1, 0.0, 0.3]))
        out = lstm_forward(desc, w, np.array([[[1.0]]]), h0=np.array([[[0.5]]]), c0=np.array([[[-0.2]]]))
        assert out.h_n.item() == pytest.approx(SCALAR_H1, rel=1e-14)
        assert out.c_n.item() == pytest.approx(SCALAR_C1, rel=1e-14)

    def test_gate_slices(self, rng):
        w = init_weights(lstm_desc(3), 2, rng)[0][0]
        np.testing.assert_array_equal(w.gate(2, 3).R, w.R[6:9])

    @pytest.mark.parametrize("bias", [True, False])
    def test_matches_naive_and_counts(self, bias, rng):
        T, B, D, H = 4, 3, 5, 4
        desc = lstm_desc(H, bias_mode=RnnBiasMode.WITH_BIAS if bias else RnnBiasMode.NO_BIAS)
        w = init_weights(desc, D, rng)[0][0]
        x = rng.standard_normal((T, B, D))
        h0, c0 = rng.standard_normal((1, B, H)), rng.standard_normal((1, B, H))
        counters = OpCounters()
        out = lstm_forward(desc, w, x, h0=h0, c0=c0, counters=counters)
        naive_count = [0]
        gates = [w.gate(g, H) for g in range(4)]
        ys, h, c = lstm_naive(*(g.W for g in gates), *(g.R for g in gates), x, h0[0], c0[0], w.bias, naive_count)
        assert rel_err(out.y, ys) <= 1e-5
        assert rel_err(out.h_n[0], h) <= 1e-5 and rel_err(out.c_n[0], c) <= 1e-5
        assert counters.gemm_calls == 1 + T
        assert naive_count[0] == 8 * T

    def test_skip_mode(self, rng):
        desc = lstm_desc(3, input_mode=RnnInputMode.SKIP)
        R, b = rng.standard_normal((12, 3)), rng.standard_normal(12)
        x = rng.standard_normal((2, 2, 3))
        counters = OpCounters()
        skip = lstm_forward(desc, RnnWeights(None, R, b), x, counters=counters)
        eye = np.vstack([np.eye(3)] * 4)
        linear = lstm_forward(lstm_desc(3), RnnWeights(eye, R, b), x)
        assert counters.gemm_calls == 2
        assert rel_err(skip.y, linear.y) <= 1e-12

    def test_skip_mode_needs_matching_sizes(self, rng):
        desc = lstm_desc(3, input_mode=RnnInputMode.SKIP)
        with pytest.raises(ShapeMismatch):
            lstm_forward(desc, RnnWeights(None, np.zeros((12, 3)), np.zeros(12)), np.zeros((2, 2, 4)))

    def test_weight_shape_checked(self):
        with pytest.raises(ShapeMismatch):
            lstm_forward(lstm_desc(2), RnnWeights(np.zeros((8, 3)), np.zeros((8, 3)), np.zeros(8)), np.zeros((1, 1, 3)))

    def test_bidirectional_is_two_passes(self, rng):
        T, B, D, H = 5, 2, 3, 4
        desc = lstm_desc(H, direction=RnnDirection.BIDIRECTIONAL)
        w = init_weights(desc, D, rng)
        x = rng.standard_normal((T, B, D))
        both = lstm_forward(desc, w, x)
        fwd = lstm_forward(lstm_desc(H), w[0][0], x)
        bwd = lstm_forward(lstm_desc(H), w[0][1], x[::-1].copy())
        np.testing.assert_array_equal(both.y, np.concatenate([fwd.y, bwd.y[::-1]], axis=2))

    def test_variable_batch_equals_per_sequence_runs(self, rng):
        sizes = (3, 2, 2, 1)
        lengths = [4, 3, 1]
        desc = lstm_desc(3)
        w = init_weights(desc, 2, rng)[0][0]
        x = rng.standard_normal((4, 3, 2))
        out = lstm_forward(desc, w, x, SeqBatchLayout(sizes))
        for b, L in enumerate(lengths):
            single = lstm_forward(desc, w, x[:L, b:b + 1])
            np.testing.assert_allclose(out.y[:L, b], single.y[:, 0], rtol=1e-12)
            assert not out.y[L:, b].any()
            np.testing.assert_allclose(out.h_n[0, b], single.h_n[0, 0], rtol=1e-12)

    def test_state_stays_finite(self, rng):
        desc = lstm_desc(3)
        w = init_weights(desc, 2, rng, scale=50.0)[0][0]
        out = lstm_forward(desc, w, rng.standard_normal((6, 2, 2)) * 100)
        assert np.isfinite(out.c_n).all() and np.isfinite(out.y).all()


class TestGemmCounts:
    @pytest.mark.parametrize("T", [1, 2, 5, 8])
    def test_constant_batch(self, T, rng):
        desc = lstm_desc(3)
        w = init_weights(desc, 2, rng)[0][0]
        x = rng.standard_normal((T, 4, 2))
        fwd = OpCounters()
        out = lstm_forward(desc, w, x, counters=fwd)
        bd = OpCounters()
        _, _, _, deltas = lstm_backward_data(desc, w, out.saved, np.ones_like(out.y), counters=bd)
        bw = OpCounters()
        lstm_backward_weights(desc, out.saved, deltas, counters=bw)
        assert (fwd.gemm_calls, bd.gemm_calls, bw.gemm_calls) == (1 + T, T + 1, 2)

    def test_variable_batch(self, rng):
        layout = SeqBatchLayout((3, 2, 2, 1))
        desc = lstm_desc(3)
        w = init_weights(desc, 2, rng)[0][0]
        out = lstm_forward(desc, w, rng.standard_normal((4, 3, 2)), layout)
        bd = OpCounters()
        _, _, _, deltas = lstm_backward_data(desc, w, out.saved, np.ones_like(out.y), counters=bd)
        bw = OpCounters()
        lstm_backward_weights(desc, out.saved, deltas, counters=bw)
        assert bd.gemm_calls == 4 + 1
        assert bw.gemm_calls == 4 + 1


class TestLstmBackward:
    def test_zero_upstream(self, rng):
        desc = lstm_desc(3)
        w = init_weights(desc, 2, rng)[0][0]
        out = lstm_forward(desc, w, rng.standard_normal((3, 2, 2)), h0=rng.standard_normal((1, 2, 3)))
        dx, dh0, dc0, deltas = lstm_backward_data(desc, w, out.saved, np.zeros_like(out.y))
        assert not (dx.any() or dh0.any() or dc0.any())
        grads = lstm_backward_weights(desc, out.saved, deltas)
        assert not (grads.dW.any() or grads.dR.any() or grads.dbias.any())

    def test_variable_batch_weights_match_zero_padded_formula(self, rng):
        layout = SeqBatchLayout((3, 2, 2, 1))
        desc = lstm_desc(3)
        w = init_weights(desc, 2, rng)[0][0]
        x = rng.standard_normal((4, 3, 2))
        out = lstm_forward(desc, w, x, layout)
        dy = rng.standard_normal(out.y.shape)
        _, _, _, deltas = lstm_backward_data(desc, w, out.saved, dy)
        grads = lstm_backward_weights(desc, out.saved, deltas)
        ds = layout.unpack(deltas[0][0], 3)  # [T, B, 4H], zero where not live
        xs = layout.unpack(layout.pack(x), 3)
        hp = layout.unpack(out.saved.traces[0][0].h_prev, 3)
        np.testing.assert_allclose(grads.dW, np.einsum("tbg,tbd->gd", ds, xs), rtol=1e-12)
        np.testing.assert_allclose(grads.dR, np.einsum("tbg,tbh->gh", ds, hp), rtol=1e-12)
        np.testing.assert_allclose(grads.dbias, ds.sum(axis=(0, 1)), rtol=1e-12)


@pytest.mark.parametrize("cell", list(RnnCell))
@pytest.mark.parametrize("direction", list(RnnDirection))
@pytest.mark.parametrize("sizes", [(3, 3, 3, 3), (3, 2, 2, 1)])
def test_gradients_finite_differences(cell, direction, sizes, rng):
    desc = RnnDescriptor(cell, 3, num_layers=2, direction=direction)
    assert rnn_gradient_check(desc, SeqBatchLayout(sizes), 3, 2, rng) <= 1e-4


def test_skip_mode_gradients(rng):
    desc = RnnDescriptor(LSTM, 2, input_mode=RnnInputMode.SKIP, bias_mode=RnnBiasMode.NO_BIAS)
    assert rnn_gradient_check(desc, SeqBatchLayout((2, 2, 1)), 2, 2, rng) <= 1e-4


class TestVanilla:
    def test_zero_weights_tanh(self):
        desc = RnnDescriptor(RnnCell.VANILLA_TANH, 3)
        out = vanilla_rnn_forward(desc, RnnWeights(np.zeros((3, 2)), np.zeros((3, 3)), np.zeros(3)), np.ones((4, 2, 2)))
        assert not out.y.any() and not out.h_n.any()

    def test_relu_scalar_walk(self):
        desc = RnnDescriptor(RnnCell.VANILLA_RELU, 1)
        w = RnnWeights(np.ones((1, 1)), np.ones((1, 1)), np.zeros(1))
        out = vanilla_rnn_forward(desc, w, np.array([[[1.0]], [[-5.0]]]))
        np.testing.assert_array_equal(out.y[:, 0, 0], [1.0, 0.0])

    @pytest.mark.parametrize("cell", [RnnCell.VANILLA_RELU, RnnCell.VANILLA_TANH])
    def test_backward_tuple(self, cell, rng):
        desc = RnnDescriptor(cell, 3)
        w = init_weights(desc, 2, rng)[0][0]
        x = rng.standard_normal((3, 2, 2))
        h0 = rng.standard_normal((1, 2, 3))
        dy = rng.standard_normal((3, 2, 3))

        def loss():
            return float((vanilla_rnn_forward(desc, w, x, h0=h0).y * dy).sum())

        out = vanilla_rnn_forward(desc, w, x, h0=h0)
        dx, dW, dR, dbias, dh0 = vanilla_rnn_backward(desc, w, out.saved, dy)
        for got, arr in [(dx, x), (dW, w.W), (dR, w.R), (dbias, w.bias), (dh0, h0)]:
            assert rel_err(got, numeric_grad(loss, arr, step=1e-5)) <= 1e-6

    def test_cell_type_enforced(self, rng):
        with pytest.raises(ValueError):
            vanilla_rnn_forward(lstm_desc(2), init_weights(lstm_desc(2), 2, rng)[0][0], np.zeros((1, 1, 2)))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=5), st.integers(0, 2**31))
def test_sorted_layouts_accepted_and_rows_live(raw, seed):
    sizes = sorted(raw, reverse=True)
    layout = SeqBatchLayout(sizes)
    desc = RnnDescriptor(RnnCell.VANILLA_TANH, 2)
    w = init_weights(desc, 2, np.random.default_rng(seed))[0][0]
    out = vanilla_rnn_forward(desc, w, np.random.default_rng(seed).standard_normal((len(sizes), sizes[0], 2)), layout)
    for t, b in enumerate(sizes):
        assert not out.y[t, b:].any()
