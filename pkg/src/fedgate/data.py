"""Synthetic heterogeneous client tasks.

Each client owns one task: regress an action sequence from the mean
embedding of the instruction's target object plus proprioception, through a
hidden linear map. Clients in the same cluster share the map up to a small
perturbation and draw objects from the same vocabulary; clusters are
disjoint, which is what makes routing-similarity-based aggregation testable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene import Detection

CLUSTER_WORDS = (
    ("cup", "plate", "bottle", "spoon", "fork", "mug",
     "bowl", "jar", "pan", "kettle", "tray", "glass"),
    ("drawer", "lamp", "book", "towel", "sponge", "switch",
     "handle", "button", "box", "shelf", "door", "basket"),
    ("wrench", "hammer", "screw", "pliers", "tape", "clamp",
     "drill", "file", "chisel", "ruler", "vise", "gauge"),
)

INSTRUCTION_TEMPLATES = (
    "push the {}",
    "grab the {}",
    "lift the {} carefully",
    "slide the {} to the left",
    "bring me the {}",
)

FOREGROUND_CUTOFF = 0.5


def _label_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class HashEmbedder:
    """Deterministic unit-norm text embeddings keyed by (seed, label)."""

    def __init__(self, dim: int, seed: int):
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def text_embed(self, label: str) -> np.ndarray:
        vec = self._cache.get(label)
        if vec is None:
            rng = np.random.default_rng(_label_seed(self.seed, label))
            vec = rng.standard_normal(self.dim)
            vec /= np.linalg.norm(vec)
            self._cache[label] = vec
        return vec

    def image_tokens(self, observation: np.ndarray) -> np.ndarray:
        # synthetic observations already are token matrices
        return observation


@dataclass
class Sample:
    tokens: np.ndarray        # (n_tokens, d_token)
    detections: list[Detection]
    instruction: str
    proprio: np.ndarray       # (prop_dim,)
    actions: np.ndarray       # (action_steps, action_dim)


@dataclass
class ClientDataset:
    client_id: int
    cluster_id: int
    vocabulary: list[str]
    train: list[Sample]
    val: list[Sample]
    target_map: np.ndarray    # hidden map, kept for diagnostics only


@dataclass
class DataConfig:
    n_clients: int = 4
    n_clusters: int = 2
    episodes_min: int = 30
    episodes_max: int = 80
    steps_min: int = 20
    steps_max: int = 100
    n_tokens: int = 16
    d_token: int = 64
    prop_dim: int = 8
    action_dim: int = 4
    action_steps: int = 4
    target_tokens: int = 4
    context_tokens: int = 3
    noise_scale: float = 0.05
    perturb_scale: float = 0.1
    val_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.n_clients < 1 or self.n_clusters < 1:
            raise ValueError("need at least one client and one cluster")
        if self.n_clusters > len(CLUSTER_WORDS):
            raise ValueError(f"at most {len(CLUSTER_WORDS)} clusters supported")
        if self.episodes_min < 1 or self.episodes_min > self.episodes_max:
            raise ValueError("bad episode range")
        if self.steps_min < 1 or self.steps_min > self.steps_max:
            raise ValueError("bad step range")
        needed = self.target_tokens + 2 * self.context_tokens
        if self.n_tokens < needed:
            raise ValueError(f"n_tokens must be >= {needed}")


def _make_sample(cfg: DataConfig, rng: np.random.Generator,
                 provider: HashEmbedder, vocab: list[str],
                 target: str, surrounding: str, background: str,
                 instruction: str, m_map: np.ndarray, p_map: np.ndarray
                 ) -> Sample:
    d = cfg.d_token
    rows = []
    for label, count in ((target, cfg.target_tokens),
                         (surrounding, cfg.context_tokens),
                         (background, cfg.context_tokens)):
        base = provider.text_embed(label)
        for _ in range(count):
            rows.append(base + cfg.noise_scale * rng.standard_normal(d))
    n_noise = cfg.n_tokens - len(rows)
    for _ in range(n_noise):
        rows.append(rng.standard_normal(d) / np.sqrt(d))
    tokens = np.stack(rows)
    mean_target = tokens[:cfg.target_tokens].mean(axis=0)
    tokens = tokens[rng.permutation(cfg.n_tokens)]

    proprio = rng.standard_normal(cfg.prop_dim)
    flat = (m_map @ mean_target + p_map @ proprio
            + cfg.noise_scale * rng.standard_normal(m_map.shape[0]))
    actions = flat.reshape(cfg.action_steps, cfg.action_dim)

    detections = [
        Detection(target, float(rng.uniform(0.70, 0.95))),
        Detection(surrounding, float(rng.uniform(0.60, 0.90))),
        Detection(background, float(rng.uniform(0.05, 0.40))),
    ]
    return Sample(tokens=tokens, detections=detections,
                  instruction=instruction, proprio=proprio, actions=actions)


def generate_clients(cfg: DataConfig, seed: int
                     ) -> tuple[list[ClientDataset], HashEmbedder]:
    provider = HashEmbedder(cfg.d_token, seed)
    out_dim = cfg.action_steps * cfg.action_dim

    cluster_maps = []
    for c in range(cfg.n_clusters):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 11, c)))
        m = rng.standard_normal((out_dim, cfg.d_token)) / np.sqrt(cfg.d_token)
        p = rng.standard_normal((out_dim, cfg.prop_dim)) / np.sqrt(cfg.prop_dim)
        cluster_maps.append((m, p))

    datasets = []
    for i in range(cfg.n_clients):
        cluster = i * cfg.n_clusters // cfg.n_clients
        vocab = list(CLUSTER_WORDS[cluster])
        rng = np.random.default_rng(np.random.SeedSequence((seed, 13, i)))
        m_base, p_base = cluster_maps[cluster]
        m_map = m_base + cfg.perturb_scale * rng.standard_normal(m_base.shape) \
            / np.sqrt(cfg.d_token)
        p_map = p_base + cfg.perturb_scale * rng.standard_normal(p_base.shape) \
            / np.sqrt(cfg.prop_dim)

        n_episodes = int(rng.integers(cfg.episodes_min, cfg.episodes_max + 1))
        episodes: list[list[Sample]] = []
        for _ in range(n_episodes):
            target, surrounding, background = (
                vocab[int(j)] for j in rng.choice(len(vocab), 3, replace=False))
            template = INSTRUCTION_TEMPLATES[
                int(rng.integers(len(INSTRUCTION_TEMPLATES)))]
            instruction = template.format(target)
            n_steps = int(rng.integers(cfg.steps_min, cfg.steps_max + 1))
            episodes.append([
                _make_sample(cfg, rng, provider, vocab, target, surrounding,
                             background, instruction, m_map, p_map)
                for _ in range(n_steps)])

        n_val = max(1, round(cfg.val_fraction * n_episodes)) \
            if n_episodes > 1 else 0
        train = [s for ep in episodes[:n_episodes - n_val] for s in ep]
        val = [s for ep in episodes[n_episodes - n_val:] for s in ep]
        if not val:  # single-episode client: split inside the episode
            split = max(1, int(0.8 * len(train)))
            train, val = train[:split], train[split:]
        datasets.append(ClientDataset(client_id=i, cluster_id=cluster,
                                      vocabulary=vocab, train=train, val=val,
                                      target_map=m_map))
    return datasets, provider


def dataset_hash(ds: ClientDataset) -> str:
    """Content hash covering every array and every piece of metadata."""
    h = hashlib.sha256()
    meta = {"client_id": ds.client_id, "cluster_id": ds.cluster_id,
            "vocabulary": ds.vocabulary}
    h.update(json.dumps(meta, sort_keys=True).encode("utf-8"))
    for part in (ds.train, ds.val):
        h.update(str(len(part)).encode())
        for s in part:
            h.update(s.instruction.encode("utf-8"))
            for det in s.detections:
                h.update(f"{det.label}:{det.confidence!r}".encode("utf-8"))
            for arr in (s.tokens, s.proprio, s.actions):
                h.update(arr.astype("<f8").tobytes())
    return h.hexdigest()


def save_datasets(out_dir: str | Path, datasets: list[ClientDataset],
                  seed: int) -> None:
    """One record per sample: instruction, detections (label, fg flag,
    confidence), and array shapes; arrays live in a sibling npz file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta: dict = {"seed": seed, "clients": []}
    arrays: dict[str, np.ndarray] = {}
    for ds in datasets:
        samples_meta = []
        for split, part in (("train", ds.train), ("val", ds.val)):
            for j, s in enumerate(part):
                key = f"c{ds.client_id}/{split}/{j}"
                arrays[f"{key}/tokens"] = s.tokens
                arrays[f"{key}/proprio"] = s.proprio
                arrays[f"{key}/actions"] = s.actions
                samples_meta.append({
                    "split": split,
                    "instruction": s.instruction,
                    "detections": [
                        {"label": d.label,
                         "foreground": d.confidence >= FOREGROUND_CUTOFF,
                         "confidence": d.confidence}
                        for d in s.detections],
                    "tokens_shape": list(s.tokens.shape),
                })
        meta["clients"].append({
            "client_id": ds.client_id, "cluster_id": ds.cluster_id,
            "vocabulary": ds.vocabulary, "samples": samples_meta,
            "target_map_shape": list(ds.target_map.shape)})
        arrays[f"c{ds.client_id}/target_map"] = ds.target_map
    (out / "scenes.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    np.savez(out / "arrays.npz", **arrays)


def load_datasets(in_dir: str | Path) -> tuple[list[ClientDataset], HashEmbedder]:
    src = Path(in_dir)
    meta = json.loads((src / "scenes.json").read_text())
    arrays = np.load(src / "arrays.npz")
    datasets = []
    d_token = 0
    for cm in meta["clients"]:
        cid = cm["client_id"]
        train: list[Sample] = []
        val: list[Sample] = []
        counters = {"train": 0, "val": 0}
        for sm in cm["samples"]:
            split = sm["split"]
            key = f"c{cid}/{split}/{counters[split]}"
            counters[split] += 1
            sample = Sample(
                tokens=arrays[f"{key}/tokens"],
                detections=[Detection(d["label"], d["confidence"])
                            for d in sm["detections"]],
                instruction=sm["instruction"],
                proprio=arrays[f"{key}/proprio"],
                actions=arrays[f"{key}/actions"])
            d_token = sample.tokens.shape[1]
            (train if split == "train" else val).append(sample)
        datasets.append(ClientDataset(
            client_id=cid, cluster_id=cm["cluster_id"],
            vocabulary=list(cm["vocabulary"]), train=train, val=val,
            target_map=arrays[f"c{cid}/target_map"]))
    return datasets, HashEmbedder(d_token, meta["seed"])
