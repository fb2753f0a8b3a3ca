"""Instruction-oriented scene parsing.

Detected objects are grouped by how they relate to the instruction: targets
(named in the instruction), surrounding foreground objects, and background.
Image tokens are assigned to groups by embedding similarity, each group is
refined by a shared gated-MoE pass, and the result is concatenated in a
canonical target/surrounding/background/remaining/proprioception order.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .kernel import cosine_sim, top_k_indices
from .moe import Params, SelectionMatrix, dgmoe_backward, dgmoe_forward

GROUP_NAMES = ("target", "surrounding", "background")


class EmbeddingProvider(Protocol):
    def text_embed(self, label: str) -> np.ndarray:
        """Unit-norm embedding for an object label; deterministic."""
        ...

    def image_tokens(self, observation) -> np.ndarray:
        """t x D token matrix for an observation."""
        ...


@dataclass(frozen=True)
class Detection:
    label: str
    confidence: float

    def __post_init__(self) -> None:
        if not self.label:
            raise ValueError("detection label must be non-empty")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class ObjectGroups:
    targets: list[str] = field(default_factory=list)
    surrounding: list[str] = field(default_factory=list)
    background: list[str] = field(default_factory=list)

    def by_name(self, name: str) -> list[str]:
        return {"target": self.targets, "surrounding": self.surrounding,
                "background": self.background}[name]


@dataclass
class SceneConfig:
    similarity_threshold: float = 0.8
    foreground_cutoff: float = 0.5
    tokens_per_group: int = 8
    enabled: bool = True


@dataclass
class SceneAssignment:
    """Instruction-dependent token routing for one sample.

    Depends only on raw tokens, detections, and the instruction, so it can
    be computed once per sample and reused every epoch.
    """

    groups: ObjectGroups
    token_groups: dict[str, np.ndarray]  # group -> original token indices
    order: np.ndarray                    # output image row -> original index
    slices: dict[str, slice]             # group -> row range after reorder

    def group_of(self) -> dict[int, str]:
        out: dict[int, str] = {}
        for name, idx in self.token_groups.items():
            for i in idx:
                out[int(i)] = name
        return out


@dataclass
class ParsedScene:
    tokens: np.ndarray  # (image tokens + proprioception tokens) x D
    assignment: SceneAssignment
    n_image: int


def extract_target_entities(instruction: str, vocabulary) -> list[str]:
    """Vocabulary labels appearing as whole words, in order of first
    appearance, case-insensitive."""
    vocab = list(vocabulary)
    if not vocab:
        raise ValueError("vocabulary must be non-empty")
    lowered = instruction.lower()
    hits: list[tuple[int, str]] = []
    for label in vocab:
        m = re.search(r"\b" + re.escape(label.lower()) + r"\b", lowered)
        if m:
            hits.append((m.start(), label))
    hits.sort()
    return [label for _, label in hits]


def categorize_objects(entities: list[str], detections: list[Detection],
                       provider: EmbeddingProvider,
                       similarity_threshold: float = 0.8,
                       foreground_cutoff: float = 0.5) -> ObjectGroups:
    """Priority rules: instruction match makes a target; otherwise high
    detector confidence makes a surrounding object; otherwise background."""
    if not 0.0 < similarity_threshold < 1.0:
        raise ValueError(f"similarity threshold {similarity_threshold} not in (0,1)")
    entity_vecs = [provider.text_embed(e) for e in entities]
    groups = ObjectGroups()
    seen: set[str] = set()
    for det in detections:
        if det.label in seen:
            continue
        seen.add(det.label)
        vec = provider.text_embed(det.label)
        if any(cosine_sim(vec, ev) >= similarity_threshold for ev in entity_vecs):
            groups.targets.append(det.label)
        elif det.confidence >= foreground_cutoff:
            groups.surrounding.append(det.label)
        else:
            groups.background.append(det.label)
    return groups


def _group_centroid(labels: list[str], provider: EmbeddingProvider) -> np.ndarray:
    vecs = np.stack([provider.text_embed(label) for label in labels])
    centroid = vecs.mean(axis=0)
    norm = np.linalg.norm(centroid)
    return centroid / norm if norm > 0.0 else centroid


def assign_tokens_to_groups(tokens: np.ndarray, groups: ObjectGroups,
                            provider: EmbeddingProvider, tokens_per_group: int = 8
                            ) -> dict[str, np.ndarray]:
    """Disjoint top-k token selection per group, target group first."""
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ValueError("tokens must be a non-empty t x D matrix")
    if tokens_per_group < 1:
        raise ValueError("tokens_per_group must be >= 1")
    norms = np.linalg.norm(tokens, axis=1)
    free = np.ones(tokens.shape[0], dtype=bool)
    out: dict[str, np.ndarray] = {}
    for name in GROUP_NAMES:
        labels = groups.by_name(name)
        if not labels or not free.any():
            out[name] = np.empty(0, dtype=np.int64)
            continue
        centroid = _group_centroid(labels, provider)
        safe_norms = np.where(norms > 0.0, norms, 1.0)
        sims = np.where(norms > 0.0, (tokens @ centroid) / safe_norms, 0.0)
        sims = np.where(free, sims, -np.inf)
        k = min(tokens_per_group, int(free.sum()))
        picked = top_k_indices(sims, k)
        free[picked] = False
        out[name] = picked.astype(np.int64)
    return out


def analyze_scene(tokens: np.ndarray, detections: list[Detection],
                  instruction: str, vocabulary, provider: EmbeddingProvider,
                  cfg: SceneConfig) -> SceneAssignment:
    """Extract entities, categorize detections, assign tokens; no parameters
    involved, so the result is a per-sample constant."""
    if not cfg.enabled:
        return identity_assignment(tokens.shape[0])
    entities = extract_target_entities(instruction, vocabulary)
    groups = categorize_objects(entities, detections, provider,
                                cfg.similarity_threshold, cfg.foreground_cutoff)
    token_groups = assign_tokens_to_groups(tokens, groups, provider,
                                           cfg.tokens_per_group)
    order_parts = [token_groups[name] for name in GROUP_NAMES]
    assigned = (np.concatenate(order_parts) if order_parts
                else np.empty(0, dtype=np.int64))
    remaining = np.setdiff1d(np.arange(tokens.shape[0], dtype=np.int64),
                             assigned, assume_unique=False)
    order = np.concatenate([assigned, remaining])
    slices: dict[str, slice] = {}
    start = 0
    for name in GROUP_NAMES:
        n = token_groups[name].size
        slices[name] = slice(start, start + n)
        start += n
    return SceneAssignment(groups=groups, token_groups=token_groups,
                           order=order, slices=slices)


def identity_assignment(n_tokens: int) -> SceneAssignment:
    """Pass-through used when scene parsing is disabled."""
    return SceneAssignment(
        groups=ObjectGroups(),
        token_groups={name: np.empty(0, dtype=np.int64) for name in GROUP_NAMES},
        order=np.arange(n_tokens, dtype=np.int64),
        slices={name: slice(0, 0) for name in GROUP_NAMES},
    )


def enhance_group_tokens(moe_params: Params, tokens: np.ndarray,
                         record: SelectionMatrix | None = None
                         ) -> tuple[np.ndarray, dict | None]:
    if tokens.shape[0] == 0:
        return tokens, None
    y, _, cache = dgmoe_forward(moe_params, tokens, None, record=record, layer=0)
    return y, cache


def parse_scene(x: np.ndarray, proprio_tokens: np.ndarray,
                assignment: SceneAssignment, moe_params: Params | None,
                record: SelectionMatrix | None = None
                ) -> tuple[ParsedScene, dict]:
    """Reorder embedded image tokens into group order, refine each group
    with the shared stem MoE layer, and append proprioception tokens."""
    reordered = x[assignment.order]
    caches: dict[str, dict] = {}
    if moe_params is not None:
        for name in GROUP_NAMES:
            sl = assignment.slices[name]
            if sl.stop > sl.start:
                # copy: the forward cache keeps a reference to its input,
                # which the write-back below would otherwise overwrite
                y, cache = enhance_group_tokens(moe_params,
                                                reordered[sl].copy(), record)
                reordered[sl] = y
                caches[name] = cache
    tokens = np.concatenate([reordered, proprio_tokens], axis=0)
    scene = ParsedScene(tokens=tokens, assignment=assignment,
                        n_image=x.shape[0])
    cache = {"assignment": assignment, "moe": caches,
             "n_image": x.shape[0], "n_prop": proprio_tokens.shape[0]}
    return scene, cache


def parse_scene_backward(cache: dict, moe_params: Params | None,
                         d_tokens: np.ndarray
                         ) -> tuple[np.ndarray, np.ndarray, Params | None]:
    """Returns gradients for the embedded image tokens (original order),
    the proprioception tokens, and the shared stem MoE parameters."""
    n_image = cache["n_image"]
    assignment: SceneAssignment = cache["assignment"]
    d_reordered = d_tokens[:n_image].copy()
    d_prop = d_tokens[n_image:]
    moe_grads: Params | None = None
    if moe_params is not None and cache["moe"]:
        moe_grads = {k: np.zeros_like(v) for k, v in moe_params.items()}
        for name, sub in cache["moe"].items():
            sl = assignment.slices[name]
            dxg, _, g = dgmoe_backward(moe_params, sub, d_reordered[sl], None)
            d_reordered[sl] = dxg
            for k in moe_grads:
                moe_grads[k] += g[k]
    dx = np.empty_like(d_reordered)
    dx[assignment.order] = d_reordered
    return dx, d_prop, moe_grads
