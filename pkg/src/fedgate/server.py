"""Server-side trunk aggregation.

Expert-driven aggregation weights each client per trunk layer by how
similarly its expert-selection counts line up with everyone else's
(normalized row sums of the pairwise cosine matrix). A uniform FedAvg
baseline shares the same weighted-averaging code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import cosine_sim
from .moe import Params, SelectionMatrix
from .params import check_same_shapes, tensors_hash

MODES = ("eda", "fedavg")


@dataclass
class RoundSubmission:
    client_id: int
    trunk: Params
    counts: SelectionMatrix


@dataclass
class RoundInfo:
    mode: str
    client_ids: list[int]
    weights: np.ndarray            # (L, N), rows sum to 1
    similarity: np.ndarray         # (L, N, N)
    degenerate_layers: list[int]   # layers that fell back to uniform weights
    trunk_hash: str

    def mean_offdiag_similarity(self) -> np.ndarray:
        n = self.similarity.shape[1]
        if n == 1:
            return np.zeros(self.similarity.shape[0])
        off = ~np.eye(n, dtype=bool)
        return self.similarity[:, off].mean(axis=1)


def selection_vector(counts: SelectionMatrix, layer: int) -> np.ndarray:
    if not 0 <= layer < counts.counts.shape[0]:
        raise ValueError(f"layer {layer} out of range")
    return counts.counts[layer].astype(np.float64)


def pairwise_similarity(vectors: list[np.ndarray]) -> np.ndarray:
    """Cosine similarity matrix; the diagonal is 1 by convention even for a
    client that never routed in this layer, so it keeps self-weight."""
    n = len(vectors)
    if n < 1:
        raise ValueError("need at least one selection vector")
    width = vectors[0].size
    for v in vectors:
        if v.size != width:
            raise ValueError("selection vectors differ in length")
    sim = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            sim[i, j] = sim[j, i] = cosine_sim(vectors[i], vectors[j])
    return sim


def aggregation_weights(sim: np.ndarray) -> tuple[np.ndarray, bool]:
    """Row sums over the grand total; the self-similarity term is included.

    Returns (weights, degenerate). A zero grand total cannot happen while
    diagonals are forced to 1, but the uniform fallback is kept and flagged.
    """
    if not np.isfinite(sim).all():
        raise ValueError("similarity matrix contains non-finite entries")
    row = sim.sum(axis=1)
    total = row.sum()
    if total <= 0.0:
        n = sim.shape[0]
        return np.full(n, 1.0 / n), True
    return row / total, False


def _layer_of(name: str) -> int:
    head = name.split("/", 1)[0]
    if not head.startswith("layer"):
        raise ValueError(f"trunk tensor {name} has no layer prefix")
    return int(head[len("layer"):])


def aggregate_trunk(submissions: list[RoundSubmission],
                    weights: np.ndarray) -> Params:
    """Per-layer convex combination of every trunk tensor.

    weights has shape (L, N) aligned with submissions sorted by client id.
    """
    subs = sorted(submissions, key=lambda s: s.client_id)
    ref = subs[0].trunk
    for other in subs[1:]:
        check_same_shapes(ref, other.trunk, "aggregating trunks")
    out: Params = {}
    for name in ref:
        w = weights[_layer_of(name)]
        acc = np.zeros_like(ref[name])
        for wi, sub in zip(w, subs):
            acc += wi * sub.trunk[name]
        out[name] = acc
    return out


def fedavg_aggregate(submissions: list[RoundSubmission]) -> Params:
    n = len(submissions)
    n_layers = submissions[0].counts.counts.shape[0]
    uniform = np.full((n_layers, n), 1.0 / n)
    return aggregate_trunk(submissions, uniform)


def run_round(submissions: list[RoundSubmission], mode: str = "eda"
              ) -> tuple[Params, RoundInfo]:
    """Aggregate one round's submissions; similarity is always recorded so
    round logs stay comparable across modes."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if not submissions:
        raise ValueError("no submissions")
    subs = sorted(submissions, key=lambda s: s.client_id)
    shape = subs[0].counts.counts.shape
    for sub in subs[1:]:
        if sub.counts.counts.shape != shape:
            raise ValueError("selection matrices differ in shape")
    n_layers = shape[0]
    n = len(subs)

    sim = np.empty((n_layers, n, n))
    weights = np.empty((n_layers, n))
    degenerate = []
    for layer in range(n_layers):
        vecs = [selection_vector(sub.counts, layer) for sub in subs]
        sim[layer] = pairwise_similarity(vecs)
        if mode == "eda":
            weights[layer], fell_back = aggregation_weights(sim[layer])
            if fell_back:
                degenerate.append(layer)
        else:
            weights[layer] = 1.0 / n

    trunk = aggregate_trunk(subs, weights)
    info = RoundInfo(mode=mode, client_ids=[s.client_id for s in subs],
                     weights=weights, similarity=sim,
                     degenerate_layers=degenerate,
                     trunk_hash=tensors_hash(trunk))
    return trunk, info
