import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src_kit.errors import ConfigError, ContractError, NumericError, ShapeError
from src_kit.numeric import (
    Adam, AttnMask, ParamStore, RMSProp, Tensor, attention, concat, cross_entropy, exp, gelu, grad_check,
    l2_normalize, layer_norm, linear, log, log_softmax, masked_attention, matmul, mean, reshape,
    rotate_pairs, softmax, take, transpose,
)


def col(*vals):
    return Tensor(np.array(vals, dtype=float).reshape(-1, 1))


def test_attention_zero_query_is_uniform_over_allowed():
    allowed = np.eye(3, dtype=bool)
    allowed[0, :2] = True
    out = masked_attention(Tensor(np.zeros((3, 1))), col(1, 2, 3), col(2, 4, 6), AttnMask(allowed))
    assert out.data[0, 0] == pytest.approx(3.0, abs=1e-12)


def test_attention_single_token():
    out = masked_attention(col(0.3), col(-1.2), col(7.0), AttnMask(np.ones((1, 1), bool)))
    assert out.data[0, 0] == 7.0


def test_attention_hand_logits_with_blocked_entry():
    # logits of row 0 are 1, 2, 3; entry (0, 2) blocked
    allowed = np.ones((3, 3), bool)
    allowed[0, 2] = False
    out = masked_attention(col(1, 1, 1), col(1, 2, 3), col(2, 4, 6), AttnMask(allowed))
    assert out.data[0, 0] == pytest.approx(3.4621171572600096, abs=1e-12)


def test_mask_validation():
    with pytest.raises(ShapeError):
        AttnMask(np.ones((2, 3), bool))
    bad = np.ones((3, 3), bool)
    bad[1, 1] = False
    with pytest.raises(ConfigError):
        AttnMask(bad)


def test_attention_shape_errors():
    m = AttnMask.full(3)
    with pytest.raises(ShapeError):
        masked_attention(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 3))), Tensor(np.zeros((3, 2))), m)
    with pytest.raises(ShapeError):
        masked_attention(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))), m)


def test_empty_mask_row_is_config_error():
    allowed = np.zeros((2, 2), bool)
    with pytest.raises(ConfigError):
        attention(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))), allowed)


def _random_mask(rng, n):
    a = rng.random((n, n)) < 0.5
    np.fill_diagonal(a, True)
    return AttnMask(a)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_attention_properties(n, d, seed):
    rng = np.random.default_rng(seed)
    q, k, v = (Tensor(rng.normal(size=(n, d))) for _ in range(3))
    mask = _random_mask(rng, n)
    out, w = masked_attention(q, k, v, mask, return_weights=True)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(w[~mask.allowed] == 0.0)
    # all-true mask matches the unmasked op
    full = masked_attention(q, k, v, AttnMask.full(n)).data
    np.testing.assert_allclose(full, attention(q, k, v).data, atol=1e-12, rtol=0)
    # values at masked positions do not leak
    i, j = np.argwhere(~mask.allowed)[0] if (~mask.allowed).any() else (None, None)
    if i is not None:
        v2 = v.data.copy()
        v2[j] += 100.0
        out2 = masked_attention(q, k, Tensor(v2), mask).data
        assert np.array_equal(out2[i], out.data[i])


def test_layer_norm_examples():
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(layer_norm(Tensor(np.full((1, 4), 5.0)), g, b).data, 0.0)
    out = layer_norm(Tensor(np.array([[1.0, -1.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-5)
    out = layer_norm(Tensor(np.array([[0.0, 2.0]])), Tensor(np.full(2, 2.0)), Tensor(np.ones(2))).data
    np.testing.assert_allclose(out, [[-0.9999900000749995, 2.9999900000749995]], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_layer_norm_rows_standardized(n, d, seed):
    x = np.random.default_rng(seed).normal(3.0, 2.0, size=(n, d))
    out = layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d)), eps=1e-12).data
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-6)


def test_grad_check_square():
    p = ParamStore()
    p.add("x", np.array(3.0))
    err = grad_check(lambda ps: ps["x"] * ps["x"], p)
    assert err < 1e-8
    p.zero_grad()
    (p["x"] * p["x"]).backward()
    assert p["x"].grad == pytest.approx(6.0)


def test_grad_check_rejects_bad_step_and_nan():
    p = ParamStore()
    p.add("x", np.array(1.0))
    with pytest.raises(ContractError):
        grad_check(lambda ps: ps["x"], p, step=1e-1)
    with pytest.raises(ContractError):
        grad_check(lambda ps: ps["x"], p, step=1e-7)
    with pytest.raises(NumericError), np.errstate(divide="ignore"):
        grad_check(lambda ps: log(ps["x"] - 1.0), p)


def test_grad_check_masked_attention():
    rng = np.random.default_rng(0)
    p = ParamStore()
    for n in "qkv":
        p.add(n, rng.normal(size=(3, 4)))
    allowed = np.eye(3, dtype=bool)
    allowed[0, 1] = allowed[2, 0] = True
    mask = AttnMask(allowed)
    err = grad_check(lambda ps: masked_attention(ps["q"], ps["k"], ps["v"], mask).sum(), p)
    assert err < 1e-4


OPS = {
    "matmul": lambda a, b: (matmul(a, transpose(b, (1, 0))) * matmul(b, transpose(a, (1, 0)))).sum(),
    "add_broadcast": lambda a, b: ((a + b[0]) * (a + b[0])).sum(),
    "mul_div": lambda a, b: (a * b / (b * b + 1.0)).sum(),
    "exp_log": lambda a, b: log(exp(a) + 1.0).sum(),
    "gelu": lambda a, b: (gelu(a) * b).sum(),
    "layer_norm": lambda a, b: (layer_norm(a, b[0], b[1]) * b).sum(),
    "softmax_xent": lambda a, b: cross_entropy(a * b, np.array([0, 2, 1, 1])),
    "l2_normalize": lambda a, b: (l2_normalize(a) * b).sum(),
    "reshape_transpose": lambda a, b: (transpose(reshape(a, (2, 2, 3)), (2, 0, 1)) * reshape(b, (3, 2, 2))).sum(),
    "concat_take": lambda a, b: (take(concat([a, b], axis=0), np.array([0, 5, 5, 7]), axis=0) * a).sum(),
    "mean_getitem": lambda a, b: (mean(a, axis=0) * b[1]).sum() + (a[1:3, ::2] * a[1:3, ::2]).sum(),
    "rotate_pairs": lambda a, b: (rotate_pairs(a[:, :2], np.cos(np.arange(4.0))[:, None],
                                               np.sin(np.arange(4.0))[:, None]) * b[:, :2]).sum(),
    "attention": lambda a, b: attention(a, b, a * b, np.tril(np.ones((4, 4), bool))).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    rng = np.random.default_rng(sorted(OPS).index(name))
    p = ParamStore()
    p.add("a", rng.normal(size=(4, 3)))
    p.add("b", rng.normal(size=(4, 3)))
    assert grad_check(lambda ps: OPS[name](ps["a"], ps["b"]), p) < 1e-4


def test_softmax_helpers():
    x = np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, -1000.0]])
    s = softmax(x)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(log_softmax(x)), s, atol=1e-12)
    assert np.isfinite(s).all()


def test_l2_normalize_zero_row():
    with pytest.raises(NumericError):
        l2_normalize(Tensor(np.zeros((1, 3))))


def test_linear_matches_matmul():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
    np.testing.assert_allclose(linear(Tensor(x), Tensor(w), Tensor(b)).data, x @ w + b, atol=1e-12)


def test_param_store_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    p = ParamStore()
    p.add("w", rng.normal(size=(3, 2)))
    p.add("b", rng.normal(size=2))
    with pytest.raises(ContractError):
        p.add("w", np.zeros(1))
    p.save(tmp_path / "ck", {"seed": 2})
    state, manifest = ParamStore.read(tmp_path / "ck")
    assert manifest["seed"] == 2 and manifest["dtype"] == "<f8"
    for k, v in p.state().items():
        assert state[k].tobytes() == v.tobytes()
    q = ParamStore()
    q.add("w", np.zeros((3, 2)))
    q.add("b", np.zeros(2))
    q.load_state(state)
    assert q.checksum() == p.checksum()


def test_param_store_detects_corruption(tmp_path):
    p = ParamStore()
    p.add("w", np.arange(4.0))
    p.save(tmp_path / "ck")
    blob = bytearray((tmp_path / "ck.bin").read_bytes())
    blob[0] ^= 1
    (tmp_path / "ck.bin").write_bytes(bytes(blob))
    with pytest.raises(ConfigError):
        ParamStore.read(tmp_path / "ck")


@pytest.mark.parametrize("opt_cls", [RMSProp, Adam])
def test_zero_lr_is_noop(opt_cls):
    p = ParamStore()
    p.add("w", np.array([1.0, -2.0]))
    before = p.checksum()
    (p["w"] * p["w"]).sum().backward()
    opt_cls(p, lr=0.0).step()
    assert p.checksum() == before


@pytest.mark.parametrize("opt_cls", [RMSProp, Adam])
def test_optimizer_descends(opt_cls):
    p = ParamStore()
    p.add("w", np.array([3.0, -2.0]))
    opt = opt_cls(p, lr=0.1)
    for _ in range(100):
        p.zero_grad()
        (p["w"] * p["w"]).sum().backward()
        opt.step()
    assert np.abs(p["w"].data).max() < 0.2


def test_rmsprop_nonfinite_gradient():
    p = ParamStore()
    p.add("w", np.array([1.0]))
    p["w"].grad = np.array([np.nan])
    with pytest.raises(NumericError):
        RMSProp(p).step()
    with pytest.raises(NumericError):
        Adam(p).step()


def test_adam_first_step_is_lr_times_sign():
    p = ParamStore()
    p.add("w", np.array([2.0, -0.5]))
    p["w"].grad = np.array([4.0, -1e-3])
    Adam(p, lr=0.1).step()
    np.testing.assert_allclose(p["w"].data, [1.9, -0.4], atol=1e-6)
