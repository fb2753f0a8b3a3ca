"""Transformer building blocks with explicit backward passes.

All activations are float64 with shape (batch, tokens, d_model).
"""

from __future__ import annotations

import numpy as np

from .kernel import softmax

LN_EPS = 1e-5

Params = dict[str, np.ndarray]


def init_layer_norm(d_model: int) -> Params:
    return {"gamma": np.ones(d_model), "beta": np.zeros(d_model)}


def layer_norm_forward(params: Params, x: np.ndarray) -> tuple[np.ndarray, dict]:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    x_hat = (x - mu) * inv_std
    y = x_hat * params["gamma"] + params["beta"]
    return y, {"x_hat": x_hat, "inv_std": inv_std}


def layer_norm_backward(params: Params, cache: dict, dy: np.ndarray
                        ) -> tuple[np.ndarray, Params]:
    x_hat, inv_std = cache["x_hat"], cache["inv_std"]
    axes = tuple(range(dy.ndim - 1))
    grads: Params = {
        "gamma": np.sum(dy * x_hat, axis=axes),
        "beta": np.sum(dy, axis=axes),
    }
    dx_hat = dy * params["gamma"]
    dx = inv_std * (dx_hat
                    - dx_hat.mean(axis=-1, keepdims=True)
                    - x_hat * np.mean(dx_hat * x_hat, axis=-1, keepdims=True))
    return dx, grads


def init_attention(rng: np.random.Generator, d_model: int) -> Params:
    scale = 1.0 / np.sqrt(d_model)
    return {
        "wq": rng.standard_normal((d_model, d_model)) * scale,
        "wk": rng.standard_normal((d_model, d_model)) * scale,
        "wv": rng.standard_normal((d_model, d_model)) * scale,
        "wo": rng.standard_normal((d_model, d_model)) * scale,
        "bq": np.zeros(d_model),
        "bk": np.zeros(d_model),
        "bv": np.zeros(d_model),
        "bo": np.zeros(d_model),
    }


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def attention_forward(params: Params, x: np.ndarray, n_heads: int
                      ) -> tuple[np.ndarray, dict]:
    """Full (non-causal) self-attention over the token axis."""
    d_model = x.shape[-1]
    if d_model % n_heads:
        raise ValueError(f"d_model {d_model} not divisible by {n_heads} heads")
    q = _split_heads(x @ params["wq"] + params["bq"], n_heads)
    k = _split_heads(x @ params["wk"] + params["bk"], n_heads)
    v = _split_heads(x @ params["wv"] + params["bv"], n_heads)
    scale = 1.0 / np.sqrt(d_model // n_heads)
    att = softmax(np.matmul(q, k.transpose(0, 1, 3, 2)) * scale, axis=-1)
    ctx = _merge_heads(np.matmul(att, v))
    y = ctx @ params["wo"] + params["bo"]
    cache = {"x": x, "q": q, "k": k, "v": v, "att": att, "ctx": ctx,
             "scale": scale, "n_heads": n_heads}
    return y, cache


def attention_backward(params: Params, cache: dict, dy: np.ndarray
                       ) -> tuple[np.ndarray, Params]:
    x, q, k, v, att = cache["x"], cache["q"], cache["k"], cache["v"], cache["att"]
    n_heads, scale = cache["n_heads"], cache["scale"]
    b, t, d = x.shape
    x2 = x.reshape(b * t, d)

    grads: Params = {
        "wo": cache["ctx"].reshape(b * t, d).T @ dy.reshape(b * t, d),
        "bo": dy.reshape(b * t, d).sum(axis=0),
    }
    d_ctx = _split_heads(dy @ params["wo"].T, n_heads)
    d_att = np.matmul(d_ctx, v.transpose(0, 1, 3, 2))
    dv = np.matmul(att.transpose(0, 1, 3, 2), d_ctx)
    # softmax jacobian along the last axis
    d_scores = att * (d_att - np.sum(d_att * att, axis=-1, keepdims=True))
    d_scores *= scale
    dq = np.matmul(d_scores, k)
    dk = np.matmul(d_scores.transpose(0, 1, 3, 2), q)

    dx = np.zeros_like(x)
    for name, grad_heads in (("q", dq), ("k", dk), ("v", dv)):
        flat = _merge_heads(grad_heads).reshape(b * t, d)
        grads[f"w{name}"] = x2.T @ flat
        grads[f"b{name}"] = flat.sum(axis=0)
        dx += (flat @ params[f"w{name}"].T).reshape(b, t, d)
    return dx, grads
