"""Federated gradient-boosted trees with learnable per-tree learning rates."""

from .aggregation import AggregatedEnsemble, PredictionMatrix, aggregate_ensembles, prediction_matrix
from .cnn import (AdamConfig, CnnConfig, CnnParams, HeadVariant, TrainConfig, adam_step,
                  client_update, forward, init_params, loss_and_grad, param_count)
from .comm import CommModel, SizeReport, comm_overhead, measured_overhead, size_report
from .data import (Dataset, LibsvmParseError, SparseExample, TaskKind, dump_libsvm, load_libsvm,
                   parse_libsvm, partition_equal, train_test_split)
from .gbdt import (GbdtConfig, Leaf, Split, SplitStats, Tree, TreeEnsemble, find_best_split,
                   grad_hess, leaf_weight, predict_margin, predict_tree, split_gain,
                   train_ensemble)
from .model_io import (ModelFormatError, deserialize_aggregate, deserialize_ensemble,
                       serialize_aggregate, serialize_ensemble)
from .protocol import (FedConfig, GlobalModel, RoundLog, evaluate_global, fedavg_aggregate,
                       round_zero, run_federation, run_training)

__version__ = "0.1.0"
