"""Deep subspace clustering with a mini-batch memory bank, on a small numpy autodiff engine."""

from .clustering import ClusterResult, acc, build_affinity, cluster_coefficients, nmi, spectral_cluster
from .config import RunConfig
from .contrastive import AugmentationSpec, augment, clbdsc_forward, info_nce, make_contrastive_batch
from .data import Dataset, SynthSpec, gen_union_of_subspaces, load_dataset, load_tensor, save_dataset, save_tensor, split_batches
from .errors import (
    ConfigError,
    ContractError,
    DatasetError,
    DegenerateError,
    DimensionError,
    NumericError,
    ParseError,
    StateError,
    SubspaceLabError,
)
from .memory_bank import MemoryBank, consistency_lr, init_from_encoder
from .optim import AdamState, adam_step
from .selfexpress import SelfExpressiveCoefficients, reconstruct_batch, reg_loss, ridge_self_expression, se_loss, total_loss
from .tensor import ParameterSet, Tensor, backward, no_grad
from .trainer import equivalence_check, full_pipeline, ablation_sweep, two_step_baseline

__version__ = "0.1.0"
