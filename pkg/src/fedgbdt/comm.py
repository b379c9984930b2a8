"""Communication-overhead and model-size accounting."""

from __future__ import annotations

from dataclasses import dataclass

from .cnn import CnnConfig, HeadVariant, param_count

MB = 1_000_000

# Reference SimFL totals (MB) for K=10, 500 trees of depth 8, used only for
# side-by-side reporting.
SIMFL_OVERHEAD_MB = {
    "a9a": 150.4,
    "cod-rna": 249.3,
    "ijcnn1": 218.4,
    "real-sim": 323.1,
    "HIGGS": 4216.0,
    "SUSY": 4136.0,
}


@dataclass(frozen=True)
class CommModel:
    """Inputs of the closed-form overhead; ``total_trees`` counts all clients' trees."""

    num_clients: int
    total_trees: int
    rounds: int
    tree_bytes: float
    cnn_bytes: float

    def __post_init__(self):
        if min(self.total_trees, self.rounds, self.tree_bytes, self.cnn_bytes) < 0:
            raise ValueError("communication model inputs must be non-negative")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")


def comm_overhead(model: CommModel) -> float:
    """``2K (M * SZ_t + R * SZ_nn)``, in the unit of the size inputs."""
    return 2 * model.num_clients * (model.total_trees * model.tree_bytes
                                    + model.rounds * model.cnn_bytes)


def measured_overhead(logs) -> int:
    return sum(entry.bytes_up + entry.bytes_down for entry in logs)


@dataclass(frozen=True)
class SizeReport:
    total_params: int
    params_bytes: int
    pass_bytes: int

    @property
    def params_mb(self) -> float:
        return self.params_bytes / MB

    @property
    def pass_mb(self) -> float:
        return self.pass_bytes / MB


def activation_count(config: CnnConfig) -> int:
    """Values produced by the layers for a single input row."""
    first = config.positions * config.out_channels
    return 2 * first + 1  # pre-activation, rectifier, scalar output


def size_report(config: CnnConfig, bytes_per_value: int = 4) -> SizeReport:
    """Parameter count and byte sizes at ``bytes_per_value`` bytes per value.

    ``pass_bytes`` counts forward activations and their gradients for one row.
    """
    total = param_count(config.trees_per_client, config.num_clients, config.channels,
                        config.head_variant)
    return SizeReport(total, total * bytes_per_value,
                      2 * activation_count(config) * bytes_per_value)


def reduction_factor(simfl_mb: float, ours_mb: float) -> float:
    return simfl_mb / ours_mb


def overhead_comparison_rows(cnn_mb: float = 0.03, num_clients: int = 10,
                             total_trees: int = 500, rounds: int = 10, tree_bytes: float = 0.0):
    """Rows ``(dataset, ours_mb, simfl_mb, factor)`` next to the SimFL reference totals."""
    ours = comm_overhead(CommModel(num_clients, total_trees, rounds, tree_bytes, cnn_mb))
    return [(name, ours, simfl, reduction_factor(simfl, ours))
            for name, simfl in SIMFL_OVERHEAD_MB.items()]


def model_size_rows(channels: int = 64, total_trees: int = 500, bytes_per_value: int = 4):
    """Size reports for the interpretable head at K=2,5,10 and both ablations at K=5."""
    rows = []
    for k in (2, 5, 10):
        cfg = CnnConfig(total_trees // k, k, channels, HeadVariant.INTERPRETABLE)
        rows.append((f"interpretable K={k}", size_report(cfg, bytes_per_value)))
    for variant in (HeadVariant.CONV_K3_S1, HeadVariant.FCNN_2LAYER_256):
        cfg = CnnConfig(total_trees // 5, 5, channels, variant)
        rows.append((f"{variant.value} K=5", size_report(cfg, bytes_per_value)))
    return rows
