"""Server-side ensemble aggregation and the per-tree prediction matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, TaskKind
from .gbdt import TreeEnsemble


@dataclass(frozen=True)
class AggregatedEnsemble:
    """All clients' ensembles, ordered by ascending client id."""

    per_client: tuple[tuple[int, TreeEnsemble], ...]

    @property
    def num_clients(self) -> int:
        return len(self.per_client)

    @property
    def trees_per_client(self) -> int:
        return self.per_client[0][1].num_trees

    @property
    def total_trees(self) -> int:
        return self.num_clients * self.trees_per_client

    @property
    def task(self) -> TaskKind:
        return self.per_client[0][1].task

    @property
    def cids(self) -> tuple[int, ...]:
        return tuple(cid for cid, _ in self.per_client)

    def ensemble(self, cid: int) -> TreeEnsemble:
        for c, ens in self.per_client:
            if c == cid:
                return ens
        raise KeyError(cid)


@dataclass(frozen=True)
class PredictionMatrix:
    values: np.ndarray  # (N, M*K), client blocks contiguous in cid order
    labels: np.ndarray

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def aggregate_ensembles(submissions) -> AggregatedEnsemble:
    subs = sorted(((int(cid), ens) for cid, ens in submissions), key=lambda s: s[0])
    if not subs:
        raise ValueError("need at least one submission")
    cids = [cid for cid, _ in subs]
    if len(set(cids)) != len(cids):
        raise ValueError(f"duplicate client id in {cids}")
    m, task = subs[0][1].num_trees, subs[0][1].task
    for cid, ens in subs:
        if ens.num_trees != m:
            raise ValueError(f"client {cid} sent {ens.num_trees} trees, expected {m}")
        if ens.task is not task:
            raise ValueError(f"client {cid} trained a {ens.task.value} ensemble, expected {task.value}")
    return AggregatedEnsemble(tuple(subs))


def prediction_matrix(agg: AggregatedEnsemble, local: Dataset,
                      scale_by_eta: bool = False) -> PredictionMatrix:
    """Raw output of every aggregated tree on every local example.

    Column ``(k-1)*M + t`` holds tree ``t`` of the k-th client in cid order.
    Outputs are unscaled unless ``scale_by_eta`` is set; base scores are
    never included.
    """
    if local.task is not agg.task:
        raise ValueError("dataset task does not match the aggregated ensemble")
    X = local.X
    blocks = []
    for _, ens in agg.per_client:
        block = ens.tree_outputs(X)
        if scale_by_eta:
            block *= ens.config.eta
        blocks.append(block)
    values = np.concatenate(blocks, axis=1) if blocks else np.zeros((len(local), 0))
    return PredictionMatrix(values, local.y.copy())


def mean_ensemble_margins(agg: AggregatedEnsemble, X: np.ndarray) -> np.ndarray:
    """Unweighted mean of every client's fixed-eta ensemble prediction."""
    return np.mean([ens.predict_margins(X) for _, ens in agg.per_client], axis=0)
