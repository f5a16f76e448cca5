"""Maxout neuron pruning and magnitude weight pruning for LeNet-style networks."""

from ._core import (
    ArgumentError,
    DataError,
    Dataset,
    DimensionError,
    Error,
    FormatError,
    IoError,
    Network,
    NetworkSpec,
    StructureError,
    TrainConfig,
    bray_curtis,
    build_network,
    count_winners,
    dead_neuron_fraction,
    eer,
    evaluate,
    far_frr,
    load_checkpoint,
    load_mnist,
    lr_at,
    param_account,
    prune_least_active,
    prune_weights,
    randomization_test,
    save_checkpoint,
    subset,
    threshold_for_fraction,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
