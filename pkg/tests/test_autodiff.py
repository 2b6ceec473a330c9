from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from buildcast import autodiff as ad
from buildcast.autodiff import FlopCounter, NonFiniteError, Tensor, finite_diff_check, value_and_grad

def weighted(t: Tensor, seed: int = 1) -> Tensor:
    """Contract an output with fixed random weights so every entry matters."""
    w = np.random.default_rng(seed).normal(size=t.shape)
    return ad.sum_(t * w)


def away_from_zero(shape, seed):
    x = np.random.default_rng(seed).normal(size=shape)
    return x + np.sign(x) * 0.2


PRIMITIVES = {
    "add": (lambda P: weighted(P["a"] + P["b"]), {"a": (3, 4), "b": (4,)}),
    "sub": (lambda P: weighted(P["a"] - P["b"]), {"a": (3, 4), "b": (3, 1)}),
    "mul": (lambda P: weighted(P["a"] * P["b"]), {"a": (3, 4), "b": (3, 4)}),
    "scale": (lambda P: weighted(ad.scale(P["a"], -2.5)), {"a": (3, 4)}),
    "reshape": (lambda P: weighted(ad.reshape(P["a"], (2, 6))), {"a": (3, 4)}),
    "transpose": (lambda P: weighted(ad.transpose(P["a"], (1, 0, 2))), {"a": (2, 3, 4)}),
    "getitem": (lambda P: weighted(ad.getitem(P["a"], (slice(1, 3), [0, 2, 2]))), {"a": (3, 4)}),
    "sum": (lambda P: weighted(ad.sum_(P["a"], axis=1)), {"a": (3, 4)}),
    "mean": (lambda P: weighted(ad.mean(P["a"], axis=0)), {"a": (3, 4)}),
    "gelu": (lambda P: weighted(ad.gelu(P["a"])), {"a": (3, 4)}),
    "tanh": (lambda P: weighted(ad.tanh(P["a"])), {"a": (3, 4)}),
    "matmul": (lambda P: weighted(P["a"] @ P["b"]), {"a": (2, 3, 4), "b": (4, 5)}),
    "layer_norm": (lambda P: weighted(ad.layer_norm(P["a"], P["g"], P["b"])), {"a": (3, 6), "g": (6,), "b": (6,)}),
    "softmax": (lambda P: weighted(ad.softmax(P["a"])), {"a": (3, 5)}),
    "logsumexp": (lambda P: weighted(ad.logsumexp(P["a"])), {"a": (3, 5)}),
    "cross_entropy": (lambda P: ad.cross_entropy(P["a"], np.array([0, 4, 2]), np.array([1.0, 0.0, 1.0])),
                      {"a": (3, 5)}),
    "embedding": (lambda P: weighted(ad.embedding(P["t"], np.array([[0, 2], [2, 3]]))), {"t": (4, 3)}),
    "attention": (lambda P: weighted(ad.attention(P["q"], P["k"], P["v"], True)),
                  {"q": (2, 4, 3), "k": (2, 4, 3), "v": (2, 4, 3)}),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_central_differences(name):
    fn, shapes = PRIMITIVES[name]
    params = {n: np.random.default_rng(i).normal(size=s) for i, (n, s) in enumerate(shapes.items())}
    assert finite_diff_check(fn, params, step=1e-6) < 1e-6


def test_relu_gradient_away_from_kink():
    params = {"a": away_from_zero((4, 5), 3)}
    assert finite_diff_check(lambda P: weighted(ad.relu(P["a"])), params, step=1e-6) < 1e-6


def test_tensor_reflected_ops_with_ndarray():
    x = np.arange(6.0).reshape(2, 3)
    loss, grads, _ = value_and_grad(lambda P: ad.sum_(x @ P["w"]) + ad.sum_(1.0 - P["w"]),
                                    {"w": np.ones((3, 2))})
    assert loss == pytest.approx(2 * x.sum())
    assert np.allclose(grads["w"], x.sum(axis=0)[:, None] - 1.0)


def test_shared_leaf_accumulates():
    _, g, _ = value_and_grad(lambda P: ad.sum_(P["a"] * P["a"] + P["a"]), {"a": np.array([1.0, -2.0])})
    assert g["a"].tolist() == [3.0, -3.0]


def test_wrt_restricts_gradients_and_aux_passthrough():
    loss, g, aux = value_and_grad(lambda P: (ad.sum_(P["a"] * P["b"]), "tag"),
                                  {"a": np.ones(2), "b": np.full(2, 3.0)}, wrt=["b"])
    assert set(g) == {"b"} and g["b"].tolist() == [1.0, 1.0] and aux == ("tag",)


def test_attention_mask_blocks_future():
    q = k = np.random.default_rng(0).normal(size=(1, 3, 2))
    v = np.eye(3)[None]
    out = ad.attention(q, k, v, True).data
    assert out[0, 0].tolist() == [1.0, 0.0, 0.0]
    assert np.all(out[0, 1, 2:] == 0.0)


def test_non_finite_backward_names_operation():
    with pytest.raises(NonFiniteError) as e, np.errstate(over="ignore"):
        value_and_grad(lambda P: ad.sum_(P["a"] * 1e308 * 1e308), {"a": np.ones(2)})
    assert e.value.op == "mul" and "mul" in str(e.value)


def test_flop_counter_counts_matmul_forward_and_backward():
    a, b = np.ones((2, 3)), np.ones((3, 4))
    with FlopCounter() as fc:
        value_and_grad(lambda P: ad.sum_(P["a"] @ P["b"]), {"a": a, "b": b})
    assert fc.forward == 2 * 2 * 3 * 4
    assert fc.backward == 2 * fc.forward


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_check(lambda P: ad.sum_(P["a"]), {"a": np.ones(1)}, step=0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 5))
def test_matmul_chain_gradient_random_shapes(seed, m, k):
    rng = np.random.default_rng(seed)
    params = {"a": rng.normal(size=(m, k)), "b": rng.normal(size=(k, 3))}
    err = finite_diff_check(lambda P: weighted(ad.tanh(P["a"] @ P["b"]), seed), params, step=1e-6)
    assert err < 1e-5  # composite: FD noise on tiny entries exceeds the per-primitive bound
