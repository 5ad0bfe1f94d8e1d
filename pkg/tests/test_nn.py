import numpy as np
import pytest

from morlbench.nn import (
    Adam, AdamState, Embedding, LayerNorm, Linear, Mlp, adam_step, check_module_gradients, load_checkpoint,
    load_mlp, log_softmax, max_relative_error, numerical_gradient, save_checkpoint, save_mlp, sigmoid, softmax,
    softmax_cross_entropy, squared_error,
)
from morlbench.nn.attention import CausalSelfAttention, TransformerBlock, attention_mask
from morlbench.nn.checkpoint import dumps_checkpoint, loads_checkpoint
from morlbench.nn.layers import make_activation


def test_zero_net_outputs_zero():
    net = Mlp([3, 5, 2], seed=0)
    for v in net.parameters().values():
        v[...] = 0.0
    assert not net.predict(np.ones((4, 3))).any()


def test_identity_layer_passes_input_through():
    net = Mlp([3, 3], seed=0)
    net.load_parameters({"0.W": np.eye(3), "0.b": np.zeros(3)})
    x = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_array_equal(net.predict(x), x)


def test_hand_computed_two_layer_forward():
    net = Mlp([2, 2, 1], "relu", seed=0)
    net.load_parameters({"0.W": np.array([[1.0, -1.0], [2.0, 0.5]]), "0.b": np.array([0.0, 1.0]),
                         "1.W": np.array([[3.0], [-2.0]]), "1.b": np.array([0.5])})
    # x=(1,1): hidden pre = (3, 0.5), relu -> (3, 0.5), out = 9 - 1 + 0.5
    # x=(1,-1): hidden pre = (-1, -0.5), relu -> 0, out = 0.5
    np.testing.assert_allclose(net.predict(np.array([[1.0, 1.0], [1.0, -1.0]])), [[8.5], [0.5]])


def test_width_mismatch_and_missing_cache():
    net = Mlp([3, 4, 2], seed=0)
    with pytest.raises(ValueError):
        net.forward(np.ones((2, 4)))
    with pytest.raises(RuntimeError):
        Mlp([3, 2], seed=0).backward(np.ones((1, 2)))
    with pytest.raises(ValueError):
        make_activation("swish")


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_mlp_gradients(activation):
    net = Mlp([4, 6, 5, 3], activation, seed=1)
    x = np.random.default_rng(2).normal(size=(7, 4))
    assert check_module_gradients(net, x) < 1e-4


def test_zero_upstream_gradient_gives_zero_gradients():
    net = Mlp([3, 4, 2], seed=0)
    net.forward(np.ones((2, 3)))
    net.backward(np.zeros((2, 2)))
    assert all(not g.any() for g in net.gradients().values())


def test_linear_weight_gradient_is_outer_product():
    lin = Linear(3, 2, np.random.default_rng(0))
    x = np.array([[1.0, 2.0, 3.0]])
    g = np.array([[0.5, -1.0]])
    lin.forward(x)
    lin.backward(g)
    np.testing.assert_allclose(lin.grads["W"], np.outer(x[0], g[0]))
    np.testing.assert_allclose(lin.grads["b"], g[0])


def test_layer_norm_and_embedding_gradients():
    rng = np.random.default_rng(0)
    ln = LayerNorm(5)
    ln.params["gamma"][:] = rng.normal(size=5)
    assert check_module_gradients(ln, rng.normal(size=(2, 3, 5))) < 1e-4
    emb = Embedding(6, 4, rng)
    ids = np.array([[0, 3, 3], [5, 1, 0]])
    out = emb.forward(ids)
    proj = rng.normal(size=out.shape)
    emb.backward(proj)
    num = numerical_gradient(lambda: float((emb.predict(ids) * proj).sum()), emb.parameters())
    assert max_relative_error(emb.gradients(), num) < 1e-4
    with pytest.raises(ValueError):
        emb.forward(np.array([6]))


def _attention_check(module, x, valid):
    rng = np.random.default_rng(1)
    out = module.forward(x, valid)
    proj = rng.normal(size=out.shape)
    gx = module.backward(proj)
    analytic = dict(module.gradients())

    def loss():
        return float((module.predict(x, valid) * proj).sum())

    numeric = numerical_gradient(loss, module.parameters())
    num_x = numerical_gradient(loss, {"x": x})["x"]
    return max(max_relative_error(analytic, numeric), max_relative_error({"x": gx}, {"x": num_x}))


@pytest.mark.parametrize("cls", [CausalSelfAttention, TransformerBlock])
def test_attention_gradients(cls):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 8))
    valid = np.ones((2, 5), dtype=bool)
    valid[1, :2] = False
    assert _attention_check(cls(8, 2, rng), x, valid) < 1e-4


def test_attention_mask_shape_and_rules():
    valid = np.array([[False, True, True]])
    m = attention_mask(valid)[0, 0]
    assert m.shape == (3, 3)
    assert m[0, 0] and not m[0, 1]          # padded query sees only itself
    assert not m[2, 0] and m[2, 1] and m[2, 2]
    assert not m[1, 2]                       # never the future


def test_adam_zero_gradient_is_a_no_op():
    p = {"w": np.array([1.0, -2.0])}
    p2, st = adam_step({"w": p["w"].copy()}, {"w": np.zeros(2)}, AdamState())
    np.testing.assert_array_equal(p2["w"], p["w"])
    assert st.step == 1


def test_adam_first_step_closed_form():
    lr = 0.01
    g = np.array([0.3, -5.0, 1e-3])
    p, _ = adam_step({"w": np.zeros(3)}, {"w": g}, AdamState(learning_rate=lr))
    # first bias-corrected step is lr * g / (|g| + eps') ~ lr * sign(g)
    assert np.all(np.sign(p["w"]) == -np.sign(g))
    assert np.all(np.abs(p["w"]) <= lr * (1 + 1e-6))
    np.testing.assert_allclose(p["w"], -lr * np.sign(g), rtol=1e-4)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState())


def test_training_is_bit_reproducible():
    def run():
        net = Mlp([3, 8, 2], seed=5)
        opt = Adam(net, 1e-2)
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.normal(size=(16, 3))
            loss, g = squared_error(net.forward(x), np.ones((16, 2)))
            net.backward(g)
            opt.step()
        return net.parameters()
    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_cross_entropy_examples():
    A = 4
    loss, g = softmax_cross_entropy(np.zeros((1, A)), np.array([2]))
    assert loss == pytest.approx(np.log(A))
    logits = np.array([[1.0, 2.0, 3.0]])
    loss, g = softmax_cross_entropy(logits, np.array([2]))
    assert loss == pytest.approx(np.log(np.exp(1) + np.exp(2) + np.exp(3)) - 3.0, abs=1e-12)
    np.testing.assert_allclose(g, softmax(logits) - np.array([[0, 0, 1]]))
    losses = [softmax_cross_entropy(np.array([[0.0, c]]), np.array([1]))[0] for c in range(0, 30, 3)]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-10


def test_cross_entropy_weights_mask_rows():
    logits = np.random.default_rng(0).normal(size=(3, 4))
    loss, g = softmax_cross_entropy(logits, np.array([0, 1, 2]), weights=np.array([1.0, 0.0, 1.0]))
    ref, _ = softmax_cross_entropy(logits[[0, 2]], np.array([0, 2]))
    assert loss == pytest.approx(ref)
    assert not g[1].any()
    loss, g = softmax_cross_entropy(logits, np.array([0, 1, 2]), weights=np.zeros(3))
    assert loss == 0.0 and not g.any()


def test_softmax_is_stable_and_normalized():
    x = np.array([[1000.0, 0.0, -1000.0], [1e-3, 2e-3, 3e-3]])
    p = softmax(x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.isfinite(log_softmax(x)))
    assert np.all(softmax(np.array([[0.0, 1.0, 2.0]])) > 0)
    s = sigmoid(np.array([-800.0, 0.0, 800.0]))
    np.testing.assert_allclose(s, [0.0, 0.5, 1.0])


def test_checkpoint_round_trip_is_byte_exact(tmp_path):
    net = Mlp([3, 7, 2], "tanh", seed=3)
    save_mlp(tmp_path / "a.json", net, algorithm="bc", seed=3)
    back, meta = load_mlp(tmp_path / "a.json")
    assert meta["algorithm"] == "bc" and back.activation == "tanh"
    save_mlp(tmp_path / "b.json", back, algorithm="bc", seed=3)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(back.predict(x), net.predict(x))


def test_checkpoint_rejects_foreign_files(tmp_path):
    with pytest.raises(ValueError):
        loads_checkpoint('{"format": "other"}')
    text = dumps_checkpoint({"w": np.ones(2)}, {})
    with pytest.raises(ValueError):
        loads_checkpoint(text.replace('"version": 1', '"version": 99'))
    save_checkpoint(tmp_path / "c.json", {"w": np.arange(6.0).reshape(2, 3)}, {"k": 1})
    params, meta = load_checkpoint(tmp_path / "c.json")
    assert params["w"].shape == (2, 3) and meta == {"k": 1}
