"""mlpk: multi-layer structured filter pruning at desk scale.

Sparsity is induced with L1-regularised training over a contiguous layer
set, one global magnitude threshold is applied to the set, filters whose
1xk rows are mostly zero are selected and physically removed (together with
every consumer slice reading them), and the smaller network is retrained.
"""
from .network import (Batch, LayerSpec, NetworkSpec, SpecError, WeightSet, accuracy, count_flops,
                      count_nonzero, count_params, desk_spec, forward, init_weights, model_size_bytes,
                      model_size_mb, vgg16_spec)
from .prune import (PruneDecision, SelectionThresholds, prune_fc_neurons, prune_filters, random_prune,
                    remove_channels, select_filters, sparsity_level)
from .sparsify import apply_threshold, search_threshold, select_alpha, train_l1
from .pipeline import Phase, PhasePlan, RunLog, run_phase, run_plan, train_baseline
from .plan import load_plan, parse_plan
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import load_cifar10, load_data, synth_dataset
from .train import DivergenceError, TrainConfig, train

__version__ = "0.1.0"
