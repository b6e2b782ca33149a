"""Unit and gradient-check tests for the tensor engine."""

import numpy as np
import pytest

from ecgintervals import tensorcore as tc


def rel_err(a, n):
    denom = np.maximum(np.abs(a) + np.abs(n), 1e-10)
    return np.max(np.abs(a - n) / denom)


def finite_diff(f, x, h=1e-6):
    """Central-difference gradient of scalar f wrt array x (f64)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def run_and_grad(build, tensors):
    """Forward+backward once; returns (loss_value, [analytic grads])."""
    for t in tensors:
        t.zero_grad()
    with tc.Tape() as tape:
        out = build()
        loss = _sum_all(out)
    tape.backward(loss)
    return loss.data.item(), [t.grad for t in tensors]


def _sum_all(t):
    # weighted sum keeps the loss sensitive to every output element
    w = _sum_all.weights
    if w is None or w.shape != t.data.shape:
        rng = np.random.default_rng(0)
        w = rng.normal(size=t.data.shape)
        _sum_all.weights = w
    out = tc.Tensor(np.array([(t.data * w).sum()]), dtype=t.data.dtype)

    def node():
        if out.grad is None or not t.requires_grad:
            return
        if t.grad is None:
            t.grad = (out.grad.item() * w).astype(t.data.dtype)
        else:
            t.grad += out.grad.item() * w
    tape = tc.active_tape()
    if tape is not None and t.requires_grad:
        out.requires_grad = True
        tape.record(node)
    return out


_sum_all.weights = None


def check_op(build, tensors, tol=1e-4):
    _sum_all.weights = None
    _, grads = run_and_grad(build, tensors)

    def loss_fn():
        with_no_tape = build()
        return float((with_no_tape.data * _sum_all.weights).sum())

    for t, g in zip(tensors, grads):
        num = finite_diff(loss_fn, t.data)
        assert g is not None
        assert rel_err(g, num) < tol, f"gradient mismatch for shape {t.data.shape}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestForward:
    def test_relu_values(self):
        y = tc.relu(tc.Tensor([-1.0, 0.0, 2.0]))
        assert np.allclose(y.data, [0.0, 0.0, 2.0])

    def test_identity_kernel(self, rng):
        x = tc.Tensor(rng.normal(size=(2, 1, 20)), dtype=np.float64)
        w = tc.Tensor(np.ones((1, 1, 1)), dtype=np.float64)
        b = tc.Tensor(np.zeros(1), dtype=np.float64)
        y = tc.conv1d(x, w, b, stride=1, padding=0)
        assert np.allclose(y.data, x.data)

    def test_conv_same_shape(self, rng):
        x = tc.Tensor(rng.normal(size=(1, 1, 2500)).astype(np.float32))
        w = tc.Tensor(rng.normal(size=(64, 1, 16)).astype(np.float32))
        b = tc.Tensor(np.zeros(64, dtype=np.float32))
        y = tc.conv1d(x, w, b, stride=1, padding="same")
        assert y.data.shape == (1, 64, 2500)

    def test_conv_out_len_formula(self, rng):
        # out_len = floor((len + 2*padding - k) / stride) + 1
        x = tc.Tensor(rng.normal(size=(1, 2, 37)))
        w = tc.Tensor(rng.normal(size=(3, 2, 5)))
        b = tc.Tensor(np.zeros(3))
        y = tc.conv1d(x, w, b, stride=3, padding=2)
        assert y.data.shape == (1, 3, (37 + 4 - 5) // 3 + 1)

    def test_conv_matches_bruteforce(self, rng):
        x = rng.normal(size=(2, 3, 11))
        w = rng.normal(size=(4, 3, 3))
        b = rng.normal(size=4)
        y = tc.conv1d(tc.Tensor(x, dtype=np.float64), tc.Tensor(w, dtype=np.float64),
                      tc.Tensor(b, dtype=np.float64), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1)))
        out_len = (11 + 2 - 3) // 2 + 1
        ref = np.zeros((2, 4, out_len))
        for bi in range(2):
            for oc in range(4):
                for t in range(out_len):
                    acc = b[oc]
                    for ic in range(3):
                        for j in range(3):
                            acc += xp[bi, ic, t * 2 + j] * w[oc, ic, j]
                    ref[bi, oc, t] = acc
        assert np.allclose(y, ref, atol=1e-12)

    def test_conv_equals_flipped_kernel_convolution(self, rng):
        # cross-correlation with w == np.convolve with reversed kernel
        x = rng.normal(size=17)
        w = rng.normal(size=5)
        y = tc.conv1d(tc.Tensor(x[None, None, :], dtype=np.float64),
                      tc.Tensor(w[None, None, :], dtype=np.float64),
                      tc.Tensor(np.zeros(1), dtype=np.float64), stride=1, padding=0).data[0, 0]
        ref = np.convolve(x, w[::-1], mode="valid")
        assert np.allclose(y, ref, atol=1e-12)

    def test_maxpool_tie_first_index(self):
        x = tc.Tensor(np.array([[[1.0, 1.0, 0.5, 0.2]]]), requires_grad=True, dtype=np.float64)
        with tc.Tape() as tape:
            y = tc.maxpool1d(x, k=2, stride=2)
            loss = tc.Tensor(np.array([y.data.sum()]), dtype=np.float64)
            tape.record(lambda: tc._accumulate(x, np.array([[[1.0, 0.0, 0.0, 0.0]]])) if False else None)
        assert np.allclose(y.data, [[[1.0, 0.5]]])

    def test_maxpool_ceil_mode_length(self, rng):
        x = tc.Tensor(rng.normal(size=(1, 2, 625)))
        y = tc.maxpool1d(x, k=2, stride=2, ceil_mode=True)
        assert y.data.shape[2] == 313
        y2 = tc.maxpool1d(x, k=2, stride=2, ceil_mode=False)
        assert y2.data.shape[2] == 312

    def test_avgpool_constant(self):
        x = tc.Tensor(np.full((2, 3, 7), 4.25))
        y = tc.avgpool_global(x)
        assert np.allclose(y.data, 4.25)
        assert y.data.shape == (2, 3)

    def test_sigmoid_range_and_values(self, rng):
        x = tc.Tensor(rng.normal(scale=50, size=(100,)), dtype=np.float64)
        y = tc.sigmoid(x).data
        assert np.all(y >= 0) and np.all(y <= 1)
        assert np.allclose(tc.sigmoid(tc.Tensor([0.0], dtype=np.float64)).data, 0.5)

    def test_batchnorm_train_normalizes(self, rng):
        x = tc.Tensor(rng.normal(loc=3.0, scale=2.5, size=(8, 4, 50)), dtype=np.float64)
        gamma = tc.Tensor(np.ones(4), dtype=np.float64)
        beta = tc.Tensor(np.zeros(4), dtype=np.float64)
        rm = tc.Tensor(np.zeros(4), dtype=np.float64)
        rv = tc.Tensor(np.ones(4), dtype=np.float64)
        y = tc.batchnorm1d(x, gamma, beta, rm, rv, training=True).data
        assert np.max(np.abs(y.mean(axis=(0, 2)))) < 1e-5
        assert np.max(np.abs(y.var(axis=(0, 2)) - 1)) < 1e-4

    def test_batchnorm_eval_identity(self, rng):
        x = tc.Tensor(rng.normal(size=(2, 3, 10)), dtype=np.float64)
        ones, zeros = np.ones(3), np.zeros(3)
        y = tc.batchnorm1d(x, tc.Tensor(ones, dtype=np.float64), tc.Tensor(zeros, dtype=np.float64),
                           tc.Tensor(zeros, dtype=np.float64), tc.Tensor(ones, dtype=np.float64),
                           training=False).data
        assert np.allclose(y, x.data, atol=1e-4)

    def test_forward_determinism(self, rng):
        x = rng.normal(size=(2, 3, 40)).astype(np.float32)
        w = rng.normal(size=(5, 3, 7)).astype(np.float32)
        b = rng.normal(size=5).astype(np.float32)
        y1 = tc.conv1d(tc.Tensor(x), tc.Tensor(w), tc.Tensor(b), stride=2, padding=3).data
        y2 = tc.conv1d(tc.Tensor(x), tc.Tensor(w), tc.Tensor(b), stride=2, padding=3).data
        assert np.array_equal(y1, y2)


class TestErrors:
    def test_shape_mismatch(self, rng):
        x = tc.Tensor(rng.normal(size=(1, 2, 10)))
        w = tc.Tensor(rng.normal(size=(3, 4, 3)))
        with pytest.raises(tc.ShapeError):
            tc.conv1d(x, w, tc.Tensor(np.zeros(3)))

    def test_non_scalar_loss(self, rng):
        x = tc.Tensor(rng.normal(size=(3,)), requires_grad=True)
        with tc.Tape() as tape:
            y = tc.relu(x)
        with pytest.raises(tc.ShapeError):
            tape.backward(y)

    def test_tape_reuse_rejected(self, rng):
        x = tc.Tensor(rng.normal(size=(2, 1, 8)), requires_grad=True, dtype=np.float64)
        with tc.Tape() as tape:
            y = tc.avgpool_global(tc.relu(x))
            loss = tc.Tensor(np.array([y.data.sum()]))
            loss.requires_grad = True
            tape.record(lambda: None)
        tape.backward(loss)
        with pytest.raises(tc.TapeError):
            tape.backward(loss)

    def test_empty_batch_batchnorm(self):
        x = tc.Tensor(np.zeros((0, 3, 10)))
        p = lambda: tc.Tensor(np.ones(3))
        with pytest.raises(tc.ShapeError):
            tc.batchnorm1d(x, p(), p(), p(), p(), training=True)


class TestGradients:
    """Central finite-difference checks in float64."""

    def test_simple_linear(self):
        # loss = weighted sum of x -> grad equals the weights
        x = tc.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True, dtype=np.float64)
        _sum_all.weights = None
        with tc.Tape() as tape:
            loss = _sum_all(x)
        tape.backward(loss)
        assert np.allclose(x.grad, _sum_all.weights)

    def test_sum_of_squares(self):
        # loss = sum(x^2) at x=[1,2] -> grad [2,4]
        x = tc.Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
        with tc.Tape() as tape:
            sq = tc.Tensor(x.data**2, dtype=np.float64)
            sq.requires_grad = True
            tape.record(lambda: tc._accumulate(x, sq.grad * 2 * x.data))
            loss = tc.Tensor(np.array([sq.data.sum()]), dtype=np.float64)
            loss.requires_grad = True
            tape.record(lambda: tc._accumulate(sq, np.broadcast_to(loss.grad, sq.data.shape)))
        tape.backward(loss)
        assert np.allclose(x.grad, [2.0, 4.0])

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, "same"), (2, 3), (3, "same")])
    def test_conv1d_grad(self, rng, stride, padding):
        x = tc.Tensor(rng.normal(size=(2, 3, 17)), requires_grad=True, dtype=np.float64)
        w = tc.Tensor(rng.normal(size=(4, 3, 5)), requires_grad=True, dtype=np.float64)
        b = tc.Tensor(rng.normal(size=4), requires_grad=True, dtype=np.float64)
        check_op(lambda: tc.conv1d(x, w, b, stride=stride, padding=padding), [x, w, b])

    def test_dense_grad(self, rng):
        x = tc.Tensor(rng.normal(size=(4, 6)), requires_grad=True, dtype=np.float64)
        w = tc.Tensor(rng.normal(size=(6, 3)), requires_grad=True, dtype=np.float64)
        b = tc.Tensor(rng.normal(size=3), requires_grad=True, dtype=np.float64)
        check_op(lambda: tc.dense(x, w, b), [x, w, b])

    def test_relu_grad(self, rng):
        x = tc.Tensor(rng.normal(size=(5, 7)) + 0.05, requires_grad=True, dtype=np.float64)
        check_op(lambda: tc.relu(x), [x])

    def test_sigmoid_grad(self, rng):
        x = tc.Tensor(rng.normal(size=(4, 4)), requires_grad=True, dtype=np.float64)
        check_op(lambda: tc.sigmoid(x), [x])

    def test_avgpool_grad(self, rng):
        x = tc.Tensor(rng.normal(size=(3, 4, 11)), requires_grad=True, dtype=np.float64)
        check_op(lambda: tc.avgpool_global(x), [x])

    @pytest.mark.parametrize("k,stride,ceil_mode", [(2, 2, False), (2, 2, True), (3, 2, False)])
    def test_maxpool_grad(self, rng, k, stride, ceil_mode):
        x = tc.Tensor(rng.normal(size=(2, 3, 13)), requires_grad=True, dtype=np.float64)
        check_op(lambda: tc.maxpool1d(x, k=k, stride=stride, ceil_mode=ceil_mode), [x])

    @pytest.mark.parametrize("training", [True, False])
    def test_batchnorm_grad(self, rng, training):
        x = tc.Tensor(rng.normal(size=(4, 3, 9)), requires_grad=True, dtype=np.float64)
        gamma = tc.Tensor(rng.normal(size=3) + 1.0, requires_grad=True, dtype=np.float64)
        beta = tc.Tensor(rng.normal(size=3), requires_grad=True, dtype=np.float64)
        rm = tc.Tensor(rng.normal(size=3), dtype=np.float64)
        rv = tc.Tensor(np.abs(rng.normal(size=3)) + 0.5, dtype=np.float64)

        def build():
            rm_c = tc.Tensor(rm.data.copy(), dtype=np.float64)
            rv_c = tc.Tensor(rv.data.copy(), dtype=np.float64)
            return tc.batchnorm1d(x, gamma, beta, rm_c, rv_c, training=training)

        check_op(build, [x, gamma, beta])

    def test_add_grad(self, rng):
        a = tc.Tensor(rng.normal(size=(3, 5)), requires_grad=True, dtype=np.float64)
        b = tc.Tensor(rng.normal(size=(3, 5)), requires_grad=True, dtype=np.float64)
        check_op(lambda: tc.add(a, b), [a, b])

    def test_shared_input_accumulates(self, rng):
        # y = x + x: grad wrt x must be 2x the upstream weights
        x = tc.Tensor(rng.normal(size=(4,)), requires_grad=True, dtype=np.float64)
        _sum_all.weights = None
        with tc.Tape() as tape:
            y = tc.add(x, x)
            loss = _sum_all(y)
        tape.backward(loss)
        assert np.allclose(x.grad, 2 * _sum_all.weights)
