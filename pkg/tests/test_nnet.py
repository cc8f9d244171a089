import math

import numpy as np
import pytest

from longform_tts import nnet
from longform_tts.gradcheck import gradient_check, random_tensor
from longform_tts.nnet import Tensor

GRAD_TOL = 1e-3


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv1d(x, kernel, bias):
    n, c_in = x.shape
    k, _, c_out = kernel.shape
    left = (k - 1) // 2
    y = np.zeros((n, c_out))
    for t in range(n):
        for j in range(k):
            src = t + j - left
            if 0 <= src < n:
                for ci in range(c_in):
                    for co in range(c_out):
                        y[t, co] += x[src, ci] * kernel[j, ci, co]
    return y + bias


def test_linear_identity_and_zero(rng):
    x = rng.normal(size=(5, 4)).astype(np.float32)
    y = nnet.linear(x, np.eye(4, dtype=np.float32), np.zeros(4, np.float32))
    np.testing.assert_array_equal(y.data, x)
    b = rng.normal(size=3).astype(np.float32)
    y = nnet.linear(np.zeros((4, 6), np.float32), rng.normal(size=(6, 3)).astype(np.float32), b)
    np.testing.assert_array_equal(y.data, np.tile(b, (4, 1)))


def test_linear_shape_mismatch():
    with pytest.raises(nnet.ShapeError):
        nnet.linear(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros(5))
    with pytest.raises(nnet.ShapeError):
        nnet.linear(np.zeros((2, 4)), np.zeros((4, 5)), np.zeros(4))


@pytest.mark.parametrize("shape", [(3, 4, 2), (1, 5, 5), (2, 3, 6, 4)])
def test_linear_gradients(rng, shape):
    *lead, d_in, d_out = shape
    x = random_tensor(rng, *lead, d_in)
    w = random_tensor(rng, d_in, d_out)
    b = random_tensor(rng, d_out)
    assert gradient_check(nnet.linear, [x, w, b]) < GRAD_TOL


def test_conv1d_pointwise_identity(rng):
    x = rng.normal(size=(7, 5)).astype(np.float32)
    y = nnet.conv1d(x, np.eye(5, dtype=np.float32)[None], np.zeros(5, np.float32))
    np.testing.assert_array_equal(y.data, x)


def test_conv1d_zero_input_gives_bias(rng):
    b = rng.normal(size=4).astype(np.float32)
    y = nnet.conv1d(np.zeros((6, 3), np.float32), rng.normal(size=(9, 3, 4)).astype(np.float32), b)
    np.testing.assert_array_equal(y.data, np.tile(b, (6, 1)))


def test_conv1d_matches_naive_loop(rng):
    x = rng.normal(size=(6, 8))
    kernel = rng.normal(size=(3, 8, 5))
    bias = rng.normal(size=5)
    y = nnet.conv1d(x, kernel, bias)
    np.testing.assert_allclose(y.data, naive_conv1d(x, kernel, bias), rtol=1e-12, atol=1e-12)


def test_conv1d_kernel_longer_than_sequence(rng):
    x = rng.normal(size=(2, 3))
    kernel = rng.normal(size=(9, 3, 2))
    np.testing.assert_allclose(nnet.conv1d(x, kernel).data, naive_conv1d(x, kernel, 0.0), atol=1e-12)


def test_conv1d_batched_equals_unbatched(rng):
    x = rng.normal(size=(3, 10, 4))
    kernel = rng.normal(size=(5, 4, 6))
    y = nnet.conv1d(x, kernel).data
    for b in range(3):
        np.testing.assert_allclose(y[b], naive_conv1d(x[b], kernel, 0.0), atol=1e-10)


@pytest.mark.parametrize("n,c_in,c_out,k", [(6, 8, 5, 3), (4, 3, 3, 9), (9, 2, 4, 1)])
def test_conv1d_gradients(rng, n, c_in, c_out, k):
    x = random_tensor(rng, n, c_in)
    kernel = random_tensor(rng, k, c_in, c_out)
    bias = random_tensor(rng, c_out)
    assert gradient_check(nnet.conv1d, [x, kernel, bias]) < GRAD_TOL


def test_conv1d_shape_errors():
    with pytest.raises(nnet.ShapeError):
        nnet.conv1d(np.zeros((4, 3)), np.zeros((3, 2, 5)))
    with pytest.raises(nnet.ShapeError):
        nnet.conv1d(np.zeros((0, 3)), np.zeros((3, 3, 5)))


def test_layer_norm_row_statistics(rng):
    x = rng.normal(3.0, 2.0, size=(10, 32)).astype(np.float32)
    y = nnet.layer_norm(x, np.ones(32, np.float32), np.zeros(32, np.float32)).data.astype(np.float64)
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-4)


@pytest.mark.parametrize("shape", [(4, 6), (2, 3, 8), (1, 5)])
def test_layer_norm_gradients(rng, shape):
    x = random_tensor(rng, *shape)
    g = random_tensor(rng, shape[-1])
    b = random_tensor(rng, shape[-1])
    assert gradient_check(nnet.layer_norm, [x, g, b]) < GRAD_TOL


def test_softmax_equal_logits():
    y = nnet.softmax(np.zeros(4, np.float32))
    np.testing.assert_allclose(y.data, [0.25] * 4)


def test_softmax_mask_gives_exact_zero(rng):
    x = rng.normal(size=(3, 5))
    mask = np.array([True, False, True, True, False])
    y = nnet.softmax(x, mask).data
    assert (y[:, ~mask] == 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("shape", [(3, 4), (2, 2, 5), (6,)])
def test_softmax_gradients(rng, shape):
    x = random_tensor(rng, *shape)
    assert gradient_check(nnet.softmax, [x]) < GRAD_TOL


@pytest.mark.parametrize("shape", [(5, 4), (2, 3, 3), (7,)])
def test_relu_gradients(rng, shape):
    # keep values away from the kink so central differences stay on one side
    data = rng.normal(size=shape)
    data = np.where(np.abs(data) < 0.05, 0.5, data)
    assert gradient_check(nnet.relu, [Tensor(data)]) < GRAD_TOL


def test_dropout_eval_is_identity(rng):
    x = Tensor(rng.normal(size=(4, 4)).astype(np.float32))
    assert nnet.dropout(x, 0.1, train=False) is x


def test_dropout_is_seed_deterministic(rng):
    x = rng.normal(size=(50, 16)).astype(np.float32)
    a = nnet.dropout(x, 0.1, True, nnet.dropout_rng(7, 3)).data
    b = nnet.dropout(x, 0.1, True, nnet.dropout_rng(7, 3)).data
    c = nnet.dropout(x, 0.1, True, nnet.dropout_rng(7, 4)).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    dropped = (a == 0).mean()
    assert 0.05 < dropped < 0.15


@pytest.mark.parametrize("shape", [(4, 5), (2, 3, 4), (9,)])
def test_dropout_gradients(rng, shape):
    x = random_tensor(rng, *shape)
    assert gradient_check(lambda t: nnet.dropout(t, 0.3, True, nnet.dropout_rng(1, 1)), [x]) < GRAD_TOL


def test_sinusoidal_positions():
    p = nnet.sinusoidal_positions(5, 8)
    assert p.shape == (5, 8)
    np.testing.assert_allclose(p[0, 0::2], 0.0)
    np.testing.assert_allclose(p[0, 1::2], 1.0)
    np.testing.assert_allclose(p[3, 0], math.sin(3.0), rtol=1e-6)
    with pytest.raises(ValueError):
        nnet.sinusoidal_positions(4, 7)


def _attention_params(rng, d, dtype=np.float64):
    return nnet.init_attention(d, rng, dtype)


def test_attention_single_token_is_value_projection(rng):
    d = 8
    p = _attention_params(rng, d)
    for b in (p.bv, p.bo, p.bq):
        b.data[:] = rng.normal(size=d)
    x = rng.normal(size=(1, d))
    out = nnet.multi_head_self_attention(x, p, heads=2).data
    expected = (x @ p.wv.data + p.bv.data) @ p.wo.data + p.bo.data
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_attention_zero_query_key_weights_is_uniform(rng):
    d, n = 8, 5
    p = _attention_params(rng, d)
    p.wq.data[:] = 0
    p.wk.data[:] = 0
    x = rng.normal(size=(n, d))
    out, weights = nnet.multi_head_self_attention(x, p, heads=2, return_weights=True)
    np.testing.assert_allclose(weights, 1.0 / n, atol=1e-12)
    v = x @ p.wv.data + p.bv.data
    expected = np.tile(v.mean(axis=0) @ p.wo.data + p.bo.data, (n, 1))
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_attention_weights_rows_sum_to_one_and_mask(rng):
    d, n = 16, 6
    p = _attention_params(rng, d, np.float32)
    x = rng.normal(size=(2, n, d)).astype(np.float32)
    mask = np.ones((2, n), bool)
    mask[1, 4:] = False
    _, w = nnet.multi_head_self_attention(x, p, heads=2, mask=mask, return_weights=True)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)
    assert (w[1, :, :, 4:] == 0).all()


def test_attention_indivisible_heads(rng):
    p = _attention_params(rng, 6)
    with pytest.raises(nnet.ShapeError):
        nnet.multi_head_self_attention(np.zeros((2, 6)), p, heads=4)


@pytest.mark.parametrize("n,d", [(4, 256), (3, 8), (1, 12)])
def test_attention_gradients(rng, n, d):
    p = _attention_params(rng, d)
    x = random_tensor(rng, n, d)
    params = list(vars(p).values())

    def fn(x, *ps):
        return nnet.multi_head_self_attention(x, nnet.AttentionParams(*ps), heads=2)

    assert gradient_check(fn, [x, *params], max_coords=12) < GRAD_TOL


@pytest.mark.parametrize("parts", [[(3, 2), (3, 4)], [(2, 2, 1), (2, 2, 3), (2, 2, 2)], [(5, 1), (5, 1)]])
def test_concat_gradients(rng, parts):
    ts = [random_tensor(rng, *s) for s in parts]
    assert gradient_check(lambda *a: nnet.concat(a, axis=-1), ts) < GRAD_TOL


@pytest.mark.parametrize("vocab,ids", [(5, [[0, 1, 1, 4]]), (3, [2, 2, 2]), (7, [[6], [0]])])
def test_embedding_gradients(rng, vocab, ids):
    table = random_tensor(rng, vocab, 4)
    assert gradient_check(lambda t: nnet.embedding(t, np.array(ids)), [table]) < GRAD_TOL


@pytest.mark.parametrize("n,t", [(3, 7), (1, 4), (5, 2)])
def test_gather_rows_gradients(rng, n, t):
    x = random_tensor(rng, 2, n, 3)
    index = rng.integers(0, n, size=(2, t))
    assert gradient_check(lambda a: nnet.gather_rows(a, index), [x]) < GRAD_TOL


@pytest.mark.parametrize("shape", [(2, 5, 3), (4, 2), (1, 1, 6)])
def test_mask_rows_and_arithmetic_gradients(rng, shape):
    mask = rng.random(shape[:-1]) > 0.3
    x = random_tensor(rng, *shape)
    y = random_tensor(rng, *shape)
    assert gradient_check(lambda a, b: nnet.mask_rows(a * b + a, mask), [x, y]) < GRAD_TOL


def test_losses_hand_values():
    pred = Tensor(np.array([0.0, 2.0], np.float32))
    target = np.zeros(2, np.float32)
    assert float(nnet.mse_loss(pred, target).data) == 2.0
    assert float(nnet.l1_loss(pred, target).data) == 1.0
    same = np.array([1.5, -2.0], np.float32)
    assert float(nnet.mse_loss(Tensor(same), same).data) == 0.0
    assert float(nnet.l1_loss(Tensor(same), same).data) == 0.0


def test_losses_with_mask_average_over_real_entries():
    pred = Tensor(np.array([[1.0, 5.0], [3.0, 100.0]]))
    target = np.zeros((2, 2))
    mask = np.array([[True, True], [True, False]])
    assert float(nnet.mse_loss(pred, target, mask).data) == pytest.approx((1 + 25 + 9) / 3)
    assert float(nnet.l1_loss(pred, target, mask).data) == pytest.approx(3.0)


def test_loss_shape_mismatch():
    with pytest.raises(nnet.ShapeError):
        nnet.mse_loss(Tensor(np.zeros(3)), np.zeros(4))


@pytest.mark.parametrize("shape", [(4,), (2, 3), (2, 2, 2)])
def test_loss_gradients(rng, shape):
    target = rng.normal(size=shape)
    x = random_tensor(rng, *shape)
    assert gradient_check(lambda p: nnet.mse_loss(p, target), [x]) < GRAD_TOL
    assert gradient_check(lambda p: nnet.l1_loss(p, target), [x]) < GRAD_TOL


def test_adam_minimizes_quadratic():
    # f(p) = (p - 3)^2 has its optimum at p = 3
    p = Tensor(np.array([0.0], np.float32), requires_grad=True)
    opt = nnet.Adam({"p": p}, lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        loss = nnet.mse_loss(p, np.array([3.0], np.float32))
        loss.backward()
        opt.step()
    assert abs(float(p.data[0]) - 3.0) < 1e-2


def test_adam_first_step_moves_by_learning_rate():
    # bias correction makes the first update exactly lr * sign(g) (up to epsilon)
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    state = nnet.AdamState(learning_rate=0.01)
    nnet.adam_step({"p": p}, {"p": np.array([4.0, -0.5])}, state)
    np.testing.assert_allclose(p.data, [0.99, -0.99], atol=1e-9)
    assert state.step == 1


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(nnet.ShapeError):
        nnet.adam_step({"p": p}, {"p": np.zeros(4)}, nnet.AdamState(0.1))


def test_checkpoint_round_trip(tmp_path, rng):
    params = {"a.w": rng.normal(size=(3, 4)).astype(np.float32), "b": np.zeros(5, np.float32), "scalarish": np.ones((1,), np.float32)}
    nnet.save_checkpoint(tmp_path / "m.ckpt", params)
    loaded = nnet.load_checkpoint(tmp_path / "m.ckpt")
    assert set(loaded) == set(params)
    for k in params:
        np.testing.assert_array_equal(loaded[k], params[k])


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(nnet.CheckpointError):
        nnet.load_checkpoint(tmp_path / "bad.ckpt")
    nnet.save_checkpoint(tmp_path / "ok.ckpt", {"w": np.ones((2, 2), np.float32)})
    raw = (tmp_path / "ok.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[:-3])
    with pytest.raises(nnet.CheckpointError):
        nnet.load_checkpoint(tmp_path / "cut.ckpt")


def test_no_grad_records_nothing(rng):
    w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    with nnet.no_grad():
        y = nnet.linear(np.ones((2, 3)), w)
    assert y._backward is None
