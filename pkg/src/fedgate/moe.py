"""Dual-gated mixture-of-experts layer.

Each layer routes tokens through a softmax token gate, filters the routed
experts with a per-expert learned threshold (sign gate), and executes only
the surviving experts. Raw pre-softmax scores are handed to the next layer
as a carry signal. A straight-through band lets the thresholds learn even
though the sign filter has zero gradient almost everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernel import gelu, gelu_grad, softmax

LAMBDA_GATE = 0.5
STE_BAND = 0.1

Params = dict[str, np.ndarray]


@dataclass
class SelectionMatrix:
    """Per-layer, per-expert acceptance counters for one client."""

    counts: np.ndarray      # (L, K) int64, accepted (token, expert) pairs
    tokens_seen: np.ndarray  # (L,) int64

    @classmethod
    def zeros(cls, n_layers: int, n_experts: int) -> "SelectionMatrix":
        return cls(counts=np.zeros((n_layers, n_experts), dtype=np.int64),
                   tokens_seen=np.zeros(n_layers, dtype=np.int64))

    def record(self, layer: int, mask: np.ndarray) -> None:
        self.counts[layer] += mask.sum(axis=0).astype(np.int64)
        self.tokens_seen[layer] += mask.shape[0]

    def density(self, layer: int | None = None) -> float:
        """Mean number of executed experts per token (mean over layers)."""
        if layer is not None:
            seen = int(self.tokens_seen[layer])
            return float(self.counts[layer].sum()) / seen if seen else 0.0
        live = self.tokens_seen > 0
        if not live.any():
            return 0.0
        per_layer = self.counts[live].sum(axis=1) / self.tokens_seen[live]
        return float(per_layer.mean())

    def reset(self) -> None:
        self.counts[:] = 0
        self.tokens_seen[:] = 0

    def copy(self) -> "SelectionMatrix":
        return SelectionMatrix(self.counts.copy(), self.tokens_seen.copy())


def density_per_token(selection: SelectionMatrix) -> tuple[np.ndarray, float]:
    """Per-layer densities and their mean. Every layer must have seen tokens."""
    if (selection.tokens_seen == 0).any():
        raise ValueError("density undefined: a layer has processed no tokens")
    per_layer = selection.counts.sum(axis=1) / selection.tokens_seen
    return per_layer, float(per_layer.mean())


def reset_counts(selection: SelectionMatrix) -> SelectionMatrix:
    selection.reset()
    return selection


def init_dgmoe_layer(rng: np.random.Generator, d_model: int, n_experts: int,
                     d_hidden: int, with_carry: bool = False) -> Params:
    """Thresholds start above the uniform softmax level, so untrained
    routing rejects every expert and falls back to argmax (density 1)."""
    p: Params = {
        "w_token": rng.standard_normal((n_experts, d_model)) / np.sqrt(d_model),
        "theta": np.full(n_experts, 1.5 / (LAMBDA_GATE * n_experts)),
        "w1": rng.standard_normal((n_experts, d_model, d_hidden)) / np.sqrt(d_model),
        "b1": np.zeros((n_experts, d_hidden)),
        "w2": rng.standard_normal((n_experts, d_hidden, d_model)) / np.sqrt(d_hidden),
        "b2": np.zeros((n_experts, d_model)),
    }
    if with_carry:
        p["w_carry"] = rng.standard_normal((n_experts, n_experts)) / np.sqrt(n_experts)
    return p


def token_gate_scores(x: np.ndarray, w_token: np.ndarray,
                      w_carry: np.ndarray | None = None,
                      carry: np.ndarray | None = None) -> np.ndarray:
    """Raw routing scores; the carry term mixes in the previous layer's
    raw scores through a learned K x K matrix."""
    if x.shape[1] != w_token.shape[1]:
        raise ValueError(f"token width {x.shape[1]} != gate width {w_token.shape[1]}")
    raw = x @ w_token.T
    if w_carry is not None:
        if carry is None:
            raise ValueError("carry gate present but no carry input")
        if carry.shape != raw.shape:
            raise ValueError(f"carry shape {carry.shape} != scores {raw.shape}")
        raw = raw + carry @ w_carry.T
    return raw


def token_selection_probs(raw: np.ndarray) -> np.ndarray:
    return softmax(raw, axis=-1)


def expert_gate_decision(s_t: np.ndarray, theta: np.ndarray,
                         lam: float = LAMBDA_GATE) -> np.ndarray:
    """Per-(token, expert) accept signal in {-1, 0, +1}; only +1 accepts."""
    return np.sign(s_t - lam * theta)


def select_experts(s_t: np.ndarray, s_e: np.ndarray
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Gate weights g and boolean accept mask.

    g keeps the softmax weight where the sign gate is positive, without
    renormalizing. A token whose row rejects everything falls back to its
    single highest-scored expert, so every token runs at least one expert.
    """
    single = s_t.ndim == 1
    probs = np.atleast_2d(s_t)
    mask = np.atleast_2d(s_e > 0.0).copy()
    dead = ~mask.any(axis=-1)
    if dead.any():
        top = np.argmax(probs[dead], axis=-1)
        mask[np.nonzero(dead)[0], top] = True
    g = np.where(mask, probs, 0.0)
    if single:
        return g[0], mask[0]
    return g, mask


def _gates(params: Params, x: np.ndarray, carry_in: np.ndarray | None,
           lam: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (raw scores, softmax scores, sign-gate margin, accept mask)."""
    raw = token_gate_scores(x, params["w_token"], params.get("w_carry"), carry_in)
    s_t = token_selection_probs(raw)
    u = s_t - lam * params["theta"][None, :]
    _, mask = select_experts(s_t, np.sign(u))
    return raw, s_t, u, mask


def _expert_eval(params: Params, x_rows: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    # einsum keeps row-subset evaluation bitwise identical to full-batch
    # evaluation; BLAS gemm does not.
    h_pre = np.einsum("md,dh->mh", x_rows, params["w1"][k]) + params["b1"][k]
    out = np.einsum("mh,hd->md", gelu(h_pre), params["w2"][k]) + params["b2"][k]
    return h_pre, out


def dgmoe_forward(params: Params, x: np.ndarray,
                  carry_in: np.ndarray | None = None, *,
                  lam: float = LAMBDA_GATE,
                  record: SelectionMatrix | None = None,
                  layer: int = 0) -> tuple[np.ndarray, np.ndarray, dict]:
    """Sparse execution: each expert sees only its accepted tokens.

    Returns (y, carry_out, cache). carry_out is the raw pre-softmax score
    matrix, consumed by the next layer's gate.
    """
    raw, s_t, u, mask = _gates(params, x, carry_in, lam)
    gate = np.where(mask, s_t, 0.0)
    y = np.zeros_like(x)
    hidden: dict[int, np.ndarray] = {}
    outputs: dict[int, np.ndarray] = {}
    rows: dict[int, np.ndarray] = {}
    for k in range(params["theta"].shape[0]):
        idx = np.nonzero(mask[:, k])[0]
        if idx.size == 0:
            continue
        h_pre, out = _expert_eval(params, x[idx], k)
        y[idx] += gate[idx, k:k + 1] * out
        rows[k], hidden[k], outputs[k] = idx, h_pre, out
    if record is not None:
        record.record(layer, mask)
    cache = {"x": x, "carry_in": carry_in, "raw": raw, "s_t": s_t, "u": u,
             "mask": mask, "gate": gate, "rows": rows, "hidden": hidden,
             "outputs": outputs, "lam": lam}
    return y, raw, cache


def dgmoe_forward_dense(params: Params, x: np.ndarray,
                        carry_in: np.ndarray | None = None, *,
                        lam: float = LAMBDA_GATE) -> tuple[np.ndarray, np.ndarray]:
    """Reference path: run every expert on every token, zero-mask the gates.

    Must agree bitwise with dgmoe_forward on the same inputs.
    """
    raw, s_t, _, mask = _gates(params, x, carry_in, lam)
    gate = np.where(mask, s_t, 0.0)
    y = np.zeros_like(x)
    for k in range(params["theta"].shape[0]):
        _, out = _expert_eval(params, x, k)
        y += gate[:, k:k + 1] * out
    return y, raw


def dgmoe_backward(params: Params, cache: dict, dy: np.ndarray,
                   dcarry_out: np.ndarray | None = None
                   ) -> tuple[np.ndarray, np.ndarray | None, Params]:
    """Backward pass for one layer.

    dcarry_out is the gradient flowing back into this layer's raw scores
    from the next layer's carry gate. The sign gate is constant along the
    softmax path; thresholds learn through a straight-through band of
    half-width STE_BAND around zero margin.
    """
    x, s_t, mask, gate = cache["x"], cache["s_t"], cache["mask"], cache["gate"]
    lam = cache["lam"]
    n_experts = params["theta"].shape[0]
    grads: Params = {k: np.zeros_like(v) for k, v in params.items()}
    dx = np.zeros_like(x)
    dgate = np.zeros_like(s_t)

    for k, idx in cache["rows"].items():
        h_pre, out = cache["hidden"][k], cache["outputs"][k]
        dy_k = dy[idx]
        dgate[idx, k] = np.sum(dy_k * out, axis=1)
        d_out = gate[idx, k:k + 1] * dy_k
        h = gelu(h_pre)
        grads["w2"][k] += h.T @ d_out
        grads["b2"][k] += d_out.sum(axis=0)
        dh_pre = (d_out @ params["w2"][k].T) * gelu_grad(h_pre)
        grads["w1"][k] += x[idx].T @ dh_pre
        grads["b1"][k] += dh_pre.sum(axis=0)
        dx[idx] += dh_pre @ params["w1"][k].T

    band = np.abs(cache["u"]) <= STE_BAND
    pending = band & ~mask
    for k in range(n_experts):
        idx = np.nonzero(pending[:, k])[0]
        if idx.size == 0:
            continue
        _, out = _expert_eval(params, x[idx], k)
        dgate[idx, k] = np.sum(dy[idx] * out, axis=1)
    grads["theta"] = -lam * np.sum(dgate * s_t * band, axis=0)

    ds_t = dgate * mask
    draw = s_t * (ds_t - np.sum(ds_t * s_t, axis=1, keepdims=True))
    if dcarry_out is not None:
        draw = draw + dcarry_out
    grads["w_token"] = draw.T @ x
    dx += draw @ params["w_token"]
    dcarry_in = None
    if "w_carry" in params:
        grads["w_carry"] = draw.T @ cache["carry_in"]
        dcarry_in = draw @ params["w_carry"]
    return dx, dcarry_in, grads


def dgmoe_param_count(d_model: int, n_experts: int, d_hidden: int,
                      with_carry: bool) -> int:
    per_expert = d_model * d_hidden + d_hidden + d_hidden * d_model + d_model
    total = n_experts * per_expert + n_experts * d_model + n_experts
    if with_carry:
        total += n_experts * n_experts
    return total


def dense_hidden_to_match(d_model: int, n_experts: int, d_hidden: int,
                          with_carry: bool) -> int:
    """Hidden width giving a single FFN the same parameter count as one
    gated layer, to within rounding."""
    target = dgmoe_param_count(d_model, n_experts, d_hidden, with_carry)
    return max(1, round((target - d_model) / (2 * d_model + 1)))


def init_dense_ffn(rng: np.random.Generator, d_model: int, d_hidden: int) -> Params:
    return {
        "w1": rng.standard_normal((d_model, d_hidden)) / np.sqrt(d_model),
        "b1": np.zeros(d_hidden),
        "w2": rng.standard_normal((d_hidden, d_model)) / np.sqrt(d_hidden),
        "b2": np.zeros(d_model),
    }


def dense_ffn_forward(params: Params, x: np.ndarray) -> tuple[np.ndarray, dict]:
    h_pre = x @ params["w1"] + params["b1"]
    y = gelu(h_pre) @ params["w2"] + params["b2"]
    return y, {"x": x, "h_pre": h_pre}


def dense_ffn_backward(params: Params, cache: dict, dy: np.ndarray
                       ) -> tuple[np.ndarray, Params]:
    x, h_pre = cache["x"], cache["h_pre"]
    h = gelu(h_pre)
    grads: Params = {
        "w2": h.T @ dy,
        "b2": dy.sum(axis=0),
    }
    dh_pre = (dy @ params["w2"].T) * gelu_grad(h_pre)
    grads["w1"] = x.T @ dh_pre
    grads["b1"] = dh_pre.sum(axis=0)
    dx = dh_pre @ params["w1"].T
    return dx, grads
