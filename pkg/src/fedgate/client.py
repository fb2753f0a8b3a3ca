"""Client model (stem-trunk-head) and the per-round local training loop.

The stem embeds image tokens and proprioception and runs the scene-parsing
enhancement; the trunk is a stack of attention + gated-MoE blocks with the
gate-score carry threaded across layers; the head pools tokens and maps to
an action sequence. Only the trunk is shared with the server; stem and head
stay on the client.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernel import AdamState, adam_update, huber_loss
from .layers import (attention_backward, attention_forward, init_attention,
                     init_layer_norm, layer_norm_backward, layer_norm_forward)
from .moe import (Params, SelectionMatrix, dense_ffn_backward,
                  dense_ffn_forward, dense_hidden_to_match, dgmoe_backward,
                  dgmoe_forward, init_dense_ffn, init_dgmoe_layer)
from .params import check_same_shapes, clone_tensors
from .scene import SceneAssignment, SceneConfig, analyze_scene


@dataclass
class ModelConfig:
    d_model: int = 64
    d_token: int = 64
    n_layers: int = 4
    n_experts: int = 8
    d_hidden: int = 0          # 0 -> 4 * d_model
    n_heads: int = 2
    prop_dim: int = 8
    action_dim: int = 4
    action_steps: int = 4
    max_tokens: int = 64
    use_moe: bool = True       # False swaps every gated layer for a dense FFN
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self) -> None:
        if self.d_hidden == 0:
            self.d_hidden = 4 * self.d_model
        for name in ("d_model", "d_token", "n_layers", "n_experts", "n_heads",
                     "prop_dim", "action_dim", "action_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class TrainConfig:
    local_epochs: int = 5
    batch_size: int = 16
    lr: float = 1e-3
    huber_delta: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be >= 1")


@dataclass
class ClientModel:
    client_id: int
    cfg: ModelConfig
    provider: object
    vocabulary: list[str]
    stem: Params
    trunk: Params
    head: Params
    stem_counts: SelectionMatrix | None
    trunk_counts: SelectionMatrix
    opt: dict[str, AdamState] = field(default_factory=dict)
    _assign: dict[int, SceneAssignment] = field(default_factory=dict)

    def assignment_for(self, sample) -> SceneAssignment:
        key = id(sample)
        cached = self._assign.get(key)
        if cached is None:
            cached = analyze_scene(sample.tokens, sample.detections,
                                   sample.instruction, self.vocabulary,
                                   self.provider, self.cfg.scene)
            self._assign[key] = cached
        return cached


def _prefixed(grads: Params, out: Params, prefix: str) -> None:
    for k, v in grads.items():
        out[prefix + k] = v


def _subparams(params: Params, prefix: str) -> Params:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def init_client_model(rng: np.random.Generator, cfg: ModelConfig,
                      client_id: int, provider, vocabulary) -> ClientModel:
    d, k, h = cfg.d_model, cfg.n_experts, cfg.d_hidden
    stem: Params = {
        "img/w": rng.standard_normal((cfg.d_token, d)) / np.sqrt(cfg.d_token),
        "img/b": np.zeros(d),
        "prop/w": rng.standard_normal((cfg.prop_dim, d)) / np.sqrt(cfg.prop_dim),
        "prop/b": np.zeros(d),
        "pos": 0.02 * rng.standard_normal((cfg.max_tokens, d)),
    }
    if cfg.use_moe:
        enh = init_dgmoe_layer(rng, d, k, h, with_carry=False)
        stem_counts: SelectionMatrix | None = SelectionMatrix.zeros(1, k)
    else:
        enh = init_dense_ffn(rng, d, dense_hidden_to_match(d, k, h, False))
        stem_counts = None
    _prefixed(enh, stem, "enh/")

    trunk: Params = {}
    for layer in range(cfg.n_layers):
        _prefixed(init_layer_norm(d), trunk, f"layer{layer}/ln1/")
        _prefixed(init_attention(rng, d), trunk, f"layer{layer}/attn/")
        _prefixed(init_layer_norm(d), trunk, f"layer{layer}/ln2/")
        if cfg.use_moe:
            moe = init_dgmoe_layer(rng, d, k, h, with_carry=layer > 0)
            _prefixed(moe, trunk, f"layer{layer}/moe/")
        else:
            width = dense_hidden_to_match(d, k, h, layer > 0)
            _prefixed(init_dense_ffn(rng, d, width), trunk, f"layer{layer}/ffn/")

    out_dim = cfg.action_steps * cfg.action_dim
    head: Params = {
        "out/w": rng.standard_normal((d, out_dim)) / np.sqrt(d),
        "out/b": np.zeros(out_dim),
    }
    return ClientModel(client_id=client_id, cfg=cfg, provider=provider,
                       vocabulary=list(vocabulary), stem=stem, trunk=trunk,
                       head=head, stem_counts=stem_counts,
                       trunk_counts=SelectionMatrix.zeros(cfg.n_layers, k))


def _forward_batch(model: ClientModel, samples: list, record: bool
                   ) -> tuple[np.ndarray, dict]:
    cfg = model.cfg
    b = len(samples)
    t = samples[0].tokens.shape[0]
    for s in samples:
        if s.tokens.shape[0] != t:
            raise ValueError("all samples in a batch need the same token count")
    tokens = np.stack([s.tokens for s in samples])      # (B, t, d_token)
    prop_in = np.stack([s.proprio for s in samples])    # (B, prop_dim)
    assigns = [model.assignment_for(s) for s in samples]

    x_img = tokens @ model.stem["img/w"] + model.stem["img/b"]
    prop = prop_in @ model.stem["prop/w"] + model.stem["prop/b"]
    orders = np.stack([a.order for a in assigns])
    x_ord = np.take_along_axis(x_img, orders[:, :, None], axis=1)

    # Grouped tokens occupy the front of each reordered sequence; the
    # enhancer is per-token, so all groups in the batch run as one call.
    n_grouped = np.array([a.slices["background"].stop for a in assigns])
    b_idx = np.repeat(np.arange(b), n_grouped)
    r_idx = np.concatenate([np.arange(n) for n in n_grouped]) if b else \
        np.empty(0, dtype=np.int64)
    enh_cache = None
    enh = _subparams(model.stem, "enh/")
    if b_idx.size:
        rows = x_ord[b_idx, r_idx]
        if cfg.use_moe:
            rec = model.stem_counts if record else None
            rows, _, enh_cache = dgmoe_forward(enh, rows, None, record=rec,
                                               layer=0)
        else:
            rows, enh_cache = dense_ffn_forward(enh, rows)
        x_ord[b_idx, r_idx] = rows

    x = np.concatenate([x_ord, prop[:, None, :]], axis=1)
    n_tok = x.shape[1]
    if n_tok > cfg.max_tokens:
        raise ValueError(f"{n_tok} tokens exceed positional table "
                         f"({cfg.max_tokens})")
    x = x + model.stem["pos"][:n_tok]

    layer_caches = []
    carry = None
    d = cfg.d_model
    for layer in range(cfg.n_layers):
        p_ln1 = _subparams(model.trunk, f"layer{layer}/ln1/")
        p_attn = _subparams(model.trunk, f"layer{layer}/attn/")
        p_ln2 = _subparams(model.trunk, f"layer{layer}/ln2/")
        h1, c_ln1 = layer_norm_forward(p_ln1, x)
        a, c_attn = attention_forward(p_attn, h1, cfg.n_heads)
        x1 = x + a
        h2, c_ln2 = layer_norm_forward(p_ln2, x1)
        flat = h2.reshape(b * n_tok, d)
        if cfg.use_moe:
            p_moe = _subparams(model.trunk, f"layer{layer}/moe/")
            rec = model.trunk_counts if record else None
            y_flat, carry, c_blk = dgmoe_forward(p_moe, flat, carry,
                                                 record=rec, layer=layer)
        else:
            p_ffn = _subparams(model.trunk, f"layer{layer}/ffn/")
            y_flat, c_blk = dense_ffn_forward(p_ffn, flat)
        x = x1 + y_flat.reshape(b, n_tok, d)
        layer_caches.append((c_ln1, c_attn, c_ln2, c_blk))

    pooled = x.mean(axis=1)
    out = pooled @ model.head["out/w"] + model.head["out/b"]
    pred = out.reshape(b, cfg.action_steps, cfg.action_dim)
    cache = {"tokens": tokens, "prop_in": prop_in, "orders": orders,
             "b_idx": b_idx, "r_idx": r_idx, "enh_cache": enh_cache,
             "layer_caches": layer_caches, "pooled": pooled, "n_tok": n_tok,
             "t": t, "b": b}
    return pred, cache


def _backward_batch(model: ClientModel, cache: dict, dpred: np.ndarray) -> Params:
    cfg = model.cfg
    b, n_tok, t = cache["b"], cache["n_tok"], cache["t"]
    d = cfg.d_model
    grads: Params = {}

    dout = dpred.reshape(b, cfg.action_steps * cfg.action_dim)
    grads["head/out/w"] = cache["pooled"].T @ dout
    grads["head/out/b"] = dout.sum(axis=0)
    dpooled = dout @ model.head["out/w"].T
    dx = np.broadcast_to(dpooled[:, None, :] / n_tok, (b, n_tok, d)).copy()

    dcarry = None
    for layer in reversed(range(cfg.n_layers)):
        c_ln1, c_attn, c_ln2, c_blk = cache["layer_caches"][layer]
        p_ln1 = _subparams(model.trunk, f"layer{layer}/ln1/")
        p_attn = _subparams(model.trunk, f"layer{layer}/attn/")
        p_ln2 = _subparams(model.trunk, f"layer{layer}/ln2/")
        dflat_in = dx.reshape(b * n_tok, d)
        if cfg.use_moe:
            p_moe = _subparams(model.trunk, f"layer{layer}/moe/")
            dflat, dcarry, g_blk = dgmoe_backward(p_moe, c_blk, dflat_in, dcarry)
            _prefixed(g_blk, grads, f"trunk/layer{layer}/moe/")
        else:
            p_ffn = _subparams(model.trunk, f"layer{layer}/ffn/")
            dflat, g_blk = dense_ffn_backward(p_ffn, c_blk, dflat_in)
            _prefixed(g_blk, grads, f"trunk/layer{layer}/ffn/")
        dh2 = dflat.reshape(b, n_tok, d)
        dx1_ln2, g_ln2 = layer_norm_backward(p_ln2, c_ln2, dh2)
        _prefixed(g_ln2, grads, f"trunk/layer{layer}/ln2/")
        dx1 = dx + dx1_ln2
        dh1, g_attn = attention_backward(p_attn, c_attn, dx1)
        _prefixed(g_attn, grads, f"trunk/layer{layer}/attn/")
        dx0_ln1, g_ln1 = layer_norm_backward(p_ln1, c_ln1, dh1)
        _prefixed(g_ln1, grads, f"trunk/layer{layer}/ln1/")
        dx = dx1 + dx0_ln1

    grads["stem/pos"] = np.zeros_like(model.stem["pos"])
    grads["stem/pos"][:n_tok] = dx.sum(axis=0)

    d_prop = dx[:, t, :]
    d_ord = dx[:, :t, :].copy()
    b_idx, r_idx = cache["b_idx"], cache["r_idx"]
    if b_idx.size:
        enh = _subparams(model.stem, "enh/")
        d_rows = d_ord[b_idx, r_idx]
        if cfg.use_moe:
            d_rows, _, g_enh = dgmoe_backward(enh, cache["enh_cache"], d_rows, None)
        else:
            d_rows, g_enh = dense_ffn_backward(enh, cache["enh_cache"], d_rows)
        d_ord[b_idx, r_idx] = d_rows
        _prefixed(g_enh, grads, "stem/enh/")

    inv = np.argsort(cache["orders"], axis=1, kind="stable")
    d_img = np.take_along_axis(d_ord, inv[:, :, None], axis=1)
    tokens, prop_in = cache["tokens"], cache["prop_in"]
    d_tok = tokens.shape[2]
    grads["stem/img/w"] = tokens.reshape(b * t, d_tok).T @ d_img.reshape(b * t, d)
    grads["stem/img/b"] = d_img.sum(axis=(0, 1))
    grads["stem/prop/w"] = prop_in.T @ d_prop
    grads["stem/prop/b"] = d_prop.sum(axis=0)
    return grads


def forward(model: ClientModel, sample) -> np.ndarray:
    """Predicted action sequence (steps x action_dim) for one sample."""
    pred, _ = _forward_batch(model, [sample], record=False)
    return pred[0]


def loss_and_grads(model: ClientModel, samples: list, targets: np.ndarray,
                   delta: float, record: bool
                   ) -> tuple[float, Params, np.ndarray]:
    pred, cache = _forward_batch(model, samples, record)
    loss, dpred = huber_loss(pred, targets, delta)
    grads = _backward_batch(model, cache, dpred)
    return loss, grads, pred


def _apply_grads(model: ClientModel, grads: Params, lr: float) -> None:
    sections = {"stem": model.stem, "trunk": model.trunk, "head": model.head}
    for key in sorted(grads):
        section, name = key.split("/", 1)
        params = sections[section]
        state = model.opt.get(key)
        if state is None:
            state = AdamState.zeros_like(params[name])
        params[name], model.opt[key] = adam_update(params[name], grads[key],
                                                   state, lr)


def local_train(model: ClientModel, samples: list, train_cfg: TrainConfig,
                global_trunk: Params, rng: np.random.Generator
                ) -> tuple[Params, SelectionMatrix, float]:
    """One round of local training.

    Loads the broadcast trunk, resets counts, runs local_epochs of minibatch
    Adam on all three sections, and returns the new trunk, the selection
    counts accumulated by training forwards, and the last batch loss.
    """
    if not samples:
        raise ValueError("training set is empty")
    apply_global_trunk(model, global_trunk)
    model.trunk_counts.reset()
    if model.stem_counts is not None:
        model.stem_counts.reset()
    n = len(samples)
    last_loss = 0.0
    for _ in range(train_cfg.local_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, train_cfg.batch_size):
            batch = [samples[int(i)] for i in perm[start:start + train_cfg.batch_size]]
            targets = np.stack([s.actions for s in batch])
            last_loss, grads, _ = loss_and_grads(model, batch, targets,
                                                 train_cfg.huber_delta,
                                                 record=True)
            _apply_grads(model, grads, train_cfg.lr)
    return clone_tensors(model.trunk), model.trunk_counts.copy(), last_loss


def evaluate(model: ClientModel, samples: list, delta: float = 1.0,
             batch_size: int = 32) -> float:
    """Mean Huber loss over a validation set; mutates nothing."""
    if not samples:
        raise ValueError("validation set is empty")
    total = 0.0
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        targets = np.stack([s.actions for s in batch])
        pred, _ = _forward_batch(model, batch, record=False)
        loss, _ = huber_loss(pred, targets, delta)
        total += loss * len(batch)
    return total / len(samples)


def apply_global_trunk(model: ClientModel, trunk: Params) -> None:
    check_same_shapes(model.trunk, trunk, "applying global trunk")
    model.trunk = clone_tensors(trunk)
