"""In-process simulation of the federated protocol.

Round 0 exchanges tree ensembles; rounds 1..R run FedAvg over the CNN head.
Every message crosses the party boundary as bytes produced by the real
codecs, so the byte counts in :class:`RoundLog` are what a network would
carry.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import cnn
from .aggregation import (AggregatedEnsemble, PredictionMatrix, aggregate_ensembles,
                          mean_ensemble_margins, prediction_matrix)
from .data import Dataset, TaskKind, partition_equal
from .gbdt import GbdtConfig, TreeEnsemble, train_ensemble
from .model_io import deserialize_aggregate, deserialize_ensemble, serialize_aggregate, \
    serialize_ensemble

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FedConfig:
    num_clients: int = 2
    rounds: int = 10
    local_epochs: int = 100
    batch_size: int = 64
    local_lr: float = 0.001
    beta1: float = 0.5
    beta2: float = 0.999
    channels: int = 64
    total_trees: int = 500
    max_depth: int = 8
    eta: float = 0.1
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    seed: int = 0
    test_fraction: float = 0.25
    head_variant: cnn.HeadVariant = cnn.HeadVariant.INTERPRETABLE
    scale_inputs_by_eta: bool = False

    def __post_init__(self):
        object.__setattr__(self, "head_variant", cnn.HeadVariant.parse(self.head_variant))
        if self.num_clients < 1 or self.rounds < 1:
            raise ValueError("num_clients and rounds must be >= 1")
        if self.total_trees % self.num_clients:
            raise ValueError(
                f"total_trees={self.total_trees} is not divisible by num_clients={self.num_clients}"
            )

    @property
    def trees_per_client(self) -> int:
        return self.total_trees // self.num_clients

    @property
    def gbdt(self) -> GbdtConfig:
        return GbdtConfig(self.trees_per_client, self.max_depth, self.eta, self.reg_lambda,
                          self.gamma, self.min_child_weight)

    @property
    def cnn(self) -> cnn.CnnConfig:
        return cnn.CnnConfig(self.trees_per_client, self.num_clients, self.channels,
                             self.head_variant)

    @property
    def adam(self) -> cnn.AdamConfig:
        return cnn.AdamConfig(self.local_lr, self.beta1, self.beta2)

    @property
    def train(self) -> cnn.TrainConfig:
        return cnn.TrainConfig(self.local_epochs, self.batch_size)


@dataclass
class ClientState:
    cid: int
    local_data: Dataset
    ensemble: TreeEnsemble | None = None
    matrix: PredictionMatrix | None = None


@dataclass
class GlobalModel:
    aggregate: AggregatedEnsemble
    cnn: cnn.CnnParams
    cnn_config: cnn.CnnConfig
    scale_inputs_by_eta: bool = False


@dataclass
class RoundLog:
    round: int
    bytes_up: int
    bytes_down: int
    global_metric: float
    per_client_loss: list[float] = field(default_factory=list)
    participants: int = 0


def client_seed(seed: int, round_no: int, cid: int) -> int:
    """Independent per-(round, client) seed derived from the master seed."""
    return int(np.random.SeedSequence([seed, round_no, cid]).generate_state(1)[0])


def fedavg_aggregate(updates) -> cnn.CnnParams:
    """Weighted coordinate-wise average with weights ``N_k / sum(N_k)``."""
    updates = list(updates)
    if not updates:
        raise ValueError("no updates to aggregate")
    counts = np.array([n for _, n in updates], dtype=np.float64)
    if (counts <= 0).any():
        raise ValueError("sample counts must be positive")
    first = updates[0][0]
    for p, _ in updates[1:]:
        for a, b in zip(first.arrays(), p.arrays()):
            if a.shape != b.shape:
                raise ValueError(f"parameter shape mismatch: {a.shape} vs {b.shape}")
    weights = counts / counts.sum()
    # first + sum w_k (a_k - first): exact when every update is identical
    out = []
    for arrays in zip(*(p.arrays() for p, _ in updates)):
        base = arrays[0]
        out.append(base + sum(w * (a - base) for w, a in zip(weights, arrays)))
    return cnn.CnnParams(*out)


def evaluate_margins(task: TaskKind, margins: np.ndarray, y: np.ndarray) -> float:
    """Accuracy (margin > 0 predicts 1) or mean squared error."""
    task = TaskKind.parse(task)
    if task is TaskKind.CLASSIFICATION:
        return float(np.mean((margins > 0.0) == (y > 0.5)))
    return float(np.mean((margins - y) ** 2))


def evaluate_global(model: GlobalModel, data: Dataset) -> float:
    S = prediction_matrix(model.aggregate, data, model.scale_inputs_by_eta)
    margins = cnn.forward(model.cnn, S.values, model.cnn_config)
    return evaluate_margins(data.task, margins, data.y)


def evaluate_mean_baseline(agg: AggregatedEnsemble, data: Dataset) -> float:
    """Metric of the unweighted mean of the clients' fixed-eta predictions."""
    return evaluate_margins(data.task, mean_ensemble_margins(agg, data.X), data.y)


def round_zero(clients: list[ClientState], config: FedConfig):
    """Train local ensembles, aggregate on the server, and build each client's matrix.

    Returns ``(aggregate, clients, w0, log)``.
    """
    uploads = []
    for client in clients:
        client.ensemble = train_ensemble(client.local_data, config.gbdt)
        uploads.append((client.cid, serialize_ensemble(client.ensemble)))
    bytes_up = sum(len(b) for _, b in uploads)

    # server side
    agg = aggregate_ensembles((cid, deserialize_ensemble(b)) for cid, b in uploads)
    broadcast = serialize_aggregate(agg)
    w0 = cnn.init_params(config.cnn, config.seed)

    for client in clients:
        received = deserialize_aggregate(broadcast)
        client.matrix = prediction_matrix(received, client.local_data,
                                          config.scale_inputs_by_eta)
    entry = RoundLog(0, bytes_up, len(broadcast) * len(clients), float("nan"),
                     participants=len(clients))
    return agg, clients, w0, entry


def run_training(config: FedConfig, train: Dataset, test: Dataset,
                 on_round=None) -> tuple[GlobalModel, list[RoundLog]]:
    """Run the whole protocol on equal IID shards of ``train``.

    Returns the global model and R + 1 round logs. ``on_round(log, model)``
    is called after round 0 and after every FedAvg round with the model as
    it stands at that point.
    """
    shards = partition_equal(train, config.num_clients, config.seed)
    return run_federation(config, shards, test, on_round)


def run_federation(config: FedConfig, shards: list[Dataset], test: Dataset,
                   on_round=None) -> tuple[GlobalModel, list[RoundLog]]:
    """Same as :func:`run_training` with the client datasets given explicitly.

    Client ids are assigned 1..K in shard order.
    """
    if len(shards) != config.num_clients:
        raise ValueError(f"got {len(shards)} shards for num_clients={config.num_clients}")
    clients = [ClientState(cid, shard) for cid, shard in enumerate(shards, start=1)]
    agg, clients, w, log0 = round_zero(clients, config)
    cnn_cfg = config.cnn
    task = test.task

    # server holds the global test set
    S_test = prediction_matrix(agg, test, config.scale_inputs_by_eta)

    def metric(params):
        return evaluate_margins(task, cnn.forward(params, S_test.values, cnn_cfg), S_test.labels)

    def snapshot(params):
        return GlobalModel(agg, params, cnn_cfg, config.scale_inputs_by_eta)

    log0.global_metric = metric(w)
    logs = [log0]
    if on_round is not None:
        on_round(log0, snapshot(w))

    for rnd in range(1, config.rounds + 1):
        message = cnn.encode_checkpoint(w, cnn_cfg)
        bytes_down = len(message) * len(clients)
        replies = []
        losses = []
        for client in clients:
            w_local, _ = cnn.decode_checkpoint(message)
            history: list[float] = []
            w_local = cnn.client_update(
                w_local, client.matrix.values, client.matrix.labels, task, cnn_cfg,
                config.train, config.adam, client_seed(config.seed, rnd, client.cid), history)
            losses.append(history[-1])
            replies.append((cnn.encode_checkpoint(w_local, cnn_cfg), client.local_data.size))
        bytes_up = sum(len(b) for b, _ in replies)
        w = fedavg_aggregate((cnn.decode_checkpoint(b)[0], n) for b, n in replies)
        entry = RoundLog(rnd, bytes_up, bytes_down, metric(w), losses, len(replies))
        log.info("round %d: metric=%.6g up=%d down=%d", rnd, entry.global_metric,
                 bytes_up, bytes_down)
        logs.append(entry)
        if on_round is not None:
            on_round(entry, snapshot(w))

    return snapshot(w), logs


def train_centralized(config: FedConfig, train: Dataset) -> TreeEnsemble:
    """One ensemble of ``total_trees`` trees on the pooled training data."""
    return train_ensemble(train, replace(config.gbdt, num_trees=config.total_trees))


def evaluate_ensemble(ensemble: TreeEnsemble, data: Dataset) -> float:
    return evaluate_margins(data.task, ensemble.predict_margins(data.X), data.y)
