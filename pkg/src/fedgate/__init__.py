"""Desk-scale federated learning simulator with dual-gated MoE routing,
instruction-oriented scene parsing, and routing-similarity aggregation."""

from .client import (ClientModel, ModelConfig, TrainConfig,
                     apply_global_trunk, evaluate, forward, init_client_model,
                     local_train)
from .data import ClientDataset, DataConfig, HashEmbedder, Sample, \
    generate_clients
from .harness import ExperimentConfig, MetricsRecord, RunResult, \
    export_metrics, run_experiment
from .moe import SelectionMatrix, dgmoe_backward, dgmoe_forward, \
    init_dgmoe_layer
from .scene import (Detection, ObjectGroups, ParsedScene, SceneConfig,
                    analyze_scene, parse_scene)
from .server import (RoundInfo, RoundSubmission, aggregate_trunk,
                     aggregation_weights, fedavg_aggregate,
                     pairwise_similarity, run_round)

__version__ = "0.1.0"
