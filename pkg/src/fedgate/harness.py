"""Experiment driver: the T-round federated loop, metrics, checkpoints.

All randomness is drawn from generators seeded by (experiment seed, client
id, round), so reruns and resumed runs reproduce results bit for bit.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .client import (ClientModel, ModelConfig, TrainConfig,
                     apply_global_trunk, evaluate, init_client_model,
                     local_train)
from .data import ClientDataset, DataConfig, generate_clients
from .kernel import AdamState
from .moe import Params, density_per_token
from .params import (clone_tensors, load_checkpoint, save_checkpoint,
                     tensors_hash)
from .scene import SceneConfig
from .server import RoundSubmission, run_round

ALL_MODES = ("eda", "fedavg", "centralized")
STATE_FILE = "state.ckpt"


@dataclass
class ExperimentConfig:
    # federation
    n_clients: int = 4
    rounds: int = 50
    mode: str = "eda"
    no_iosp: bool = False
    no_dgmoe: bool = False
    no_eda: bool = False
    seed: int = 0
    checkpoint_every: int = 0      # rounds between checkpoints; 0 = final only
    # local training
    local_epochs: int = 5
    batch_size: int = 16
    lr: float = 1e-3
    huber_delta: float = 1.0
    # model dimensions
    d_model: int = 64
    d_hidden: int = 0              # expert hidden width; 0 = 4 * d_model
    n_layers: int = 4
    n_experts: int = 8
    n_heads: int = 2
    prop_dim: int = 8
    action_dim: int = 4
    action_steps: int = 4
    # scene parsing
    similarity_threshold: float = 0.8
    foreground_cutoff: float = 0.5
    tokens_per_group: int = 8
    # synthetic data
    n_clusters: int = 2
    episodes_min: int = 30
    episodes_max: int = 80
    steps_min: int = 20
    steps_max: int = 100
    n_tokens: int = 16
    d_token: int = 64
    target_tokens: int = 4
    context_tokens: int = 3
    noise_scale: float = 0.05
    perturb_scale: float = 0.1

    def __post_init__(self) -> None:
        if self.mode not in ALL_MODES:
            raise ValueError(f"mode must be one of {ALL_MODES}")
        for name in ("n_clients", "rounds", "local_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def aggregation_mode(self) -> str:
        return "fedavg" if self.no_eda and self.mode == "eda" else self.mode

    def model_config(self) -> ModelConfig:
        scene = SceneConfig(similarity_threshold=self.similarity_threshold,
                            foreground_cutoff=self.foreground_cutoff,
                            tokens_per_group=self.tokens_per_group,
                            enabled=not self.no_iosp)
        return ModelConfig(d_model=self.d_model, d_token=self.d_token,
                           n_layers=self.n_layers, n_experts=self.n_experts,
                           d_hidden=self.d_hidden,
                           n_heads=self.n_heads, prop_dim=self.prop_dim,
                           action_dim=self.action_dim,
                           action_steps=self.action_steps,
                           max_tokens=self.n_tokens + 1,
                           use_moe=not self.no_dgmoe, scene=scene)

    def train_config(self) -> TrainConfig:
        return TrainConfig(local_epochs=self.local_epochs,
                           batch_size=self.batch_size, lr=self.lr,
                           huber_delta=self.huber_delta, seed=self.seed)

    def data_config(self) -> DataConfig:
        return DataConfig(n_clients=self.n_clients,
                          n_clusters=self.n_clusters,
                          episodes_min=self.episodes_min,
                          episodes_max=self.episodes_max,
                          steps_min=self.steps_min, steps_max=self.steps_max,
                          n_tokens=self.n_tokens, d_token=self.d_token,
                          prop_dim=self.prop_dim,
                          action_dim=self.action_dim,
                          action_steps=self.action_steps,
                          target_tokens=self.target_tokens,
                          context_tokens=self.context_tokens,
                          noise_scale=self.noise_scale,
                          perturb_scale=self.perturb_scale)


@dataclass
class MetricsRecord:
    round_index: int
    val_losses: dict[int, float]
    density_layers: dict[int, np.ndarray]
    density_overall: dict[int, float]
    activations: dict[int, np.ndarray]     # (L, K) counts per client
    weights: np.ndarray | None             # (L, N); None in centralized mode
    similarity: np.ndarray | None          # (L, N, N); None in centralized mode
    mean_offdiag: np.ndarray | None
    degenerate_layers: list[int]
    trunk_hash: str
    client_trunk_hashes: dict[int, str]
    wall_clock: float


@dataclass
class RunResult:
    config: ExperimentConfig
    records: list[MetricsRecord]
    models: list[ClientModel]
    datasets: list[ClientDataset]
    global_trunk: Params | None
    out_dir: Path | None


def _client_rng(seed: int, client_id: int, round_index: int
                ) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((seed, client_id, round_index)))


def _densities(config: ExperimentConfig, counts) -> tuple[np.ndarray, float]:
    if config.no_dgmoe:
        return np.zeros(config.n_layers), 0.0
    return density_per_token(counts)


def _record_round(config: ExperimentConfig, round_index: int,
                  submissions: list[RoundSubmission],
                  val_losses: dict[int, float], weights, similarity,
                  mean_offdiag, degenerate, trunk_hash: str,
                  wall: float) -> MetricsRecord:
    density_layers = {}
    density_overall = {}
    activations = {}
    hashes = {}
    for sub in submissions:
        per_layer, overall = _densities(config, sub.counts)
        density_layers[sub.client_id] = per_layer
        density_overall[sub.client_id] = overall
        activations[sub.client_id] = sub.counts.counts.copy()
        hashes[sub.client_id] = tensors_hash(sub.trunk)
    return MetricsRecord(round_index=round_index, val_losses=val_losses,
                         density_layers=density_layers,
                         density_overall=density_overall,
                         activations=activations, weights=weights,
                         similarity=similarity, mean_offdiag=mean_offdiag,
                         degenerate_layers=degenerate, trunk_hash=trunk_hash,
                         client_trunk_hashes=hashes, wall_clock=wall)


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None,
                   resume_from: str | Path | None = None,
                   verbose: bool = False) -> RunResult:
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(
            json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")

    datasets, provider = generate_clients(config.data_config(), config.seed)
    tcfg = config.train_config()
    models, global_trunk = build_models(config, datasets, provider)

    start_round = 0
    if resume_from is not None:
        start_round, global_trunk = _load_state(Path(resume_from), models)

    records: list[MetricsRecord] = []
    for round_index in range(start_round + 1, config.rounds + 1):
        t0 = time.perf_counter()
        if config.mode == "centralized":
            record = _centralized_round(config, tcfg, models[0], datasets,
                                        round_index, t0)
            global_trunk = clone_tensors(models[0].trunk)
        else:
            submissions = []
            for model, ds in zip(models, datasets):
                rng = _client_rng(config.seed, model.client_id, round_index)
                try:
                    trunk, counts, _ = local_train(model, ds.train, tcfg,
                                                   global_trunk, rng)
                except Exception as exc:
                    raise RuntimeError(
                        f"round {round_index} client {model.client_id} "
                        f"failed: {exc}") from exc
                submissions.append(
                    RoundSubmission(model.client_id, trunk, counts))
            global_trunk, info = run_round(submissions,
                                           config.aggregation_mode())
            for model in models:
                apply_global_trunk(model, global_trunk)
            val_losses = {m.client_id: evaluate(m, ds.val, config.huber_delta,
                                                config.batch_size)
                          for m, ds in zip(models, datasets)}
            record = _record_round(config, round_index, submissions,
                                   val_losses, info.weights, info.similarity,
                                   info.mean_offdiag_similarity(),
                                   info.degenerate_layers, info.trunk_hash,
                                   time.perf_counter() - t0)
        records.append(record)
        if verbose:
            mean_loss = float(np.mean(list(record.val_losses.values())))
            mean_density = float(np.mean(list(record.density_overall.values())))
            print(f"round {record.round_index}: mean val loss "
                  f"{mean_loss:.4f}, density {mean_density:.3f}")
        if out is not None and config.checkpoint_every > 0 \
                and round_index % config.checkpoint_every == 0:
            _save_state(out / STATE_FILE, config, models, global_trunk,
                        round_index)

    if out is not None:
        export_metrics(records, config, out)
        write_round_log(records, config, out)
        _save_state(out / STATE_FILE, config, models, global_trunk,
                    config.rounds)
    return RunResult(config=config, records=records, models=models,
                     datasets=datasets, global_trunk=global_trunk,
                     out_dir=out)


def build_models(config: ExperimentConfig, datasets: list[ClientDataset],
                 provider) -> tuple[list[ClientModel], Params]:
    """Fresh models plus the shared starting trunk, both seed-determined.

    Every participant starts from one broadcast initialization; stems and
    heads only diverge afterwards through local training."""
    mcfg = config.model_config()
    reference = init_client_model(
        np.random.default_rng(np.random.SeedSequence((config.seed, 19))),
        mcfg, -1, provider, [])
    if config.mode == "centralized":
        vocab = sorted({w for ds in datasets for w in ds.vocabulary})
        model = _from_reference(reference, 0, vocab)
        return [model], clone_tensors(model.trunk)
    models = [_from_reference(reference, ds.client_id, ds.vocabulary)
              for ds in datasets]
    return models, clone_tensors(reference.trunk)


def _from_reference(reference: ClientModel, client_id: int,
                    vocabulary: list[str]) -> ClientModel:
    """A client's fresh model: reference parameters, own identity."""
    return ClientModel(
        client_id=client_id, cfg=reference.cfg, provider=reference.provider,
        vocabulary=list(vocabulary),
        stem=clone_tensors(reference.stem),
        trunk=clone_tensors(reference.trunk),
        head=clone_tensors(reference.head),
        stem_counts=None if reference.stem_counts is None
        else reference.stem_counts.copy(),
        trunk_counts=reference.trunk_counts.copy())


def load_experiment(path: str | Path
                    ) -> tuple[ExperimentConfig, list[ClientModel],
                               list[ClientDataset], Params, int]:
    """Rebuild a checkpointed experiment: config, models with restored
    parameters and optimizer state, datasets, global trunk, round."""
    ckpt = Path(path)
    if ckpt.is_dir():
        ckpt = ckpt / STATE_FILE
    manifest, _ = load_checkpoint(ckpt)
    config = ExperimentConfig(**manifest["config"])
    datasets, provider = generate_clients(config.data_config(), config.seed)
    models, _ = build_models(config, datasets, provider)
    round_index, global_trunk = _load_state(ckpt, models)
    return config, models, datasets, global_trunk, round_index


def _centralized_round(config: ExperimentConfig, tcfg: TrainConfig,
                       model: ClientModel, datasets: list[ClientDataset],
                       round_index: int, t0: float) -> MetricsRecord:
    pooled = [s for ds in datasets for s in ds.train]
    rng = _client_rng(config.seed, model.client_id, round_index)
    trunk, counts, _ = local_train(model, pooled, tcfg, model.trunk, rng)
    val_losses = {ds.client_id: evaluate(model, ds.val, config.huber_delta,
                                         config.batch_size)
                  for ds in datasets}
    per_layer, overall = _densities(config, counts)
    trunk_hash = tensors_hash(trunk)
    return MetricsRecord(
        round_index=round_index, val_losses=val_losses,
        density_layers={ds.client_id: per_layer for ds in datasets},
        density_overall={ds.client_id: overall for ds in datasets},
        activations={ds.client_id: counts.counts.copy() for ds in datasets},
        weights=None, similarity=None, mean_offdiag=None, degenerate_layers=[],
        trunk_hash=trunk_hash,
        client_trunk_hashes={model.client_id: trunk_hash},
        wall_clock=time.perf_counter() - t0)


def metrics_header(config: ExperimentConfig) -> list[str]:
    cols = ["round", "client_id", "val_loss", "density_overall"]
    cols += [f"density_layer_{layer}" for layer in range(config.n_layers)]
    cols += [f"act_l{layer}_e{k}" for layer in range(config.n_layers)
             for k in range(config.n_experts)]
    return cols


def metrics_csv_text(records: list[MetricsRecord],
                     config: ExperimentConfig) -> str:
    """Deterministic CSV: repr() float formatting, no wall-clock column."""
    lines = [",".join(metrics_header(config))]
    for rec in records:
        for cid in sorted(rec.val_losses):
            row = [str(rec.round_index), str(cid),
                   repr(rec.val_losses[cid]), repr(rec.density_overall[cid])]
            row += [repr(float(x)) for x in rec.density_layers[cid]]
            row += [str(int(x)) for x in rec.activations[cid].reshape(-1)]
            lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def summary_dict(records: list[MetricsRecord],
                 config: ExperimentConfig) -> dict:
    final = records[-1]
    all_densities = [d for rec in records
                     for d in rec.density_overall.values()]
    return {
        "rounds": len(records),
        "mode": config.mode,
        "no_iosp": config.no_iosp,
        "no_dgmoe": config.no_dgmoe,
        "no_eda": config.no_eda,
        "seed": config.seed,
        "final_val_loss": {str(cid): loss
                           for cid, loss in sorted(final.val_losses.items())},
        "final_mean_val_loss": float(np.mean(list(final.val_losses.values()))),
        "mean_density_overall": float(np.mean(all_densities)),
        "final_weights": None if final.weights is None
        else final.weights.tolist(),
        "final_trunk_hash": final.trunk_hash,
    }


def export_metrics(records: list[MetricsRecord], config: ExperimentConfig,
                   out_dir: str | Path) -> tuple[Path, Path]:
    if not records:
        raise ValueError("no records to export")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv"
    csv_path.write_text(metrics_csv_text(records, config))
    summary_path = out / "summary.json"
    summary_path.write_text(
        json.dumps(summary_dict(records, config), indent=2, sort_keys=True)
        + "\n")
    return csv_path, summary_path


def write_round_log(records: list[MetricsRecord], config: ExperimentConfig,
                    out_dir: str | Path) -> Path:
    path = Path(out_dir) / "records.jsonl"
    lines = []
    for rec in records:
        lines.append(json.dumps({
            "round": rec.round_index,
            "mode": config.aggregation_mode(),
            "weights": None if rec.weights is None else rec.weights.tolist(),
            "similarity": None if rec.similarity is None
            else rec.similarity.tolist(),
            "mean_offdiag_similarity": None if rec.mean_offdiag is None
            else rec.mean_offdiag.tolist(),
            "degenerate_layers": rec.degenerate_layers,
            "trunk_hash": rec.trunk_hash,
            "client_trunk_hashes": {str(k): v for k, v in
                                    sorted(rec.client_trunk_hashes.items())},
            "wall_clock": rec.wall_clock,
        }, sort_keys=True))
    path.write_text("\n".join(lines) + "\n")
    return path


def _save_state(path: Path, config: ExperimentConfig,
                models: list[ClientModel], global_trunk: Params,
                round_index: int) -> None:
    tensors: Params = {}
    for model in models:
        cid = model.client_id
        for section_name in ("stem", "trunk", "head"):
            for k, v in getattr(model, section_name).items():
                tensors[f"client{cid}/{section_name}/{k}"] = v
        for key, state in model.opt.items():
            tensors[f"client{cid}/opt/{key}/m"] = state.m
            tensors[f"client{cid}/opt/{key}/v"] = state.v
            tensors[f"client{cid}/opt/{key}/step"] = np.array(float(state.step))
    for k, v in global_trunk.items():
        tensors[f"global/trunk/{k}"] = v
    manifest = {"round": round_index, "config": asdict(config),
                "client_ids": [m.client_id for m in models]}
    save_checkpoint(path, manifest, tensors)


def _load_state(path: Path, models: list[ClientModel]
                ) -> tuple[int, Params]:
    if path.is_dir():
        path = path / STATE_FILE
    manifest, tensors = load_checkpoint(path)
    for model in models:
        prefix = f"client{model.client_id}/"
        opt_raw: dict[str, dict[str, np.ndarray]] = {}
        for name, value in tensors.items():
            if not name.startswith(prefix):
                continue
            rest = name[len(prefix):]
            section, key = rest.split("/", 1)
            if section in ("stem", "trunk", "head"):
                target = getattr(model, section)
                if key not in target:
                    raise ValueError(f"unknown tensor {name} in checkpoint")
                if target[key].shape != value.shape:
                    raise ValueError(f"shape mismatch for {name}")
                target[key] = value
            elif section == "opt":
                param_key, part = key.rsplit("/", 1)
                opt_raw.setdefault(param_key, {})[part] = value
        model.opt = {key: AdamState(m=parts["m"], v=parts["v"],
                                    step=int(parts["step"]))
                     for key, parts in opt_raw.items()}
    global_trunk = {name[len("global/trunk/"):]: value
                    for name, value in tensors.items()
                    if name.startswith("global/trunk/")}
    return int(manifest["round"]), global_trunk
