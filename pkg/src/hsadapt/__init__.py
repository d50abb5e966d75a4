"""Adaptor networks for k-channel images on 3-channel pretrained backbones."""

from .adaptors import (
    AdaptorSpec,
    DivergenceError,
    IdentityAdaptor,
    LinearAdaptor,
    MultiLayerAdaptor,
    SubsetAdaptor,
    autoencoder_pretrain,
    build_adaptor,
)
from .backbone import Backbone, Checkpoint, inflate_first_layer, replace_head, restore
from .dataproc import SplitData, build_dataset, expand_channels, invert_expansion, kmeans
from .gradcheck import finite_diff_check
from .harness import (
    ExperimentConfig,
    degradation_study,
    finetune,
    multiview_cells,
    pretrain,
    run_benchmark,
    standard_cells,
    train_scratch,
)
from .multiview import (
    DiversityRegConfig,
    MultiViewModel,
    Schedule,
    diversity_reg,
    multiview_forward,
    scale_schedule,
)
from .optim import Adam, ParamGroup
from .tensor import NonFiniteError, Tensor, load_tensor, save_tensor

__all__ = [
    "AdaptorSpec",
    "Adam",
    "Backbone",
    "Checkpoint",
    "DivergenceError",
    "DiversityRegConfig",
    "ExperimentConfig",
    "IdentityAdaptor",
    "LinearAdaptor",
    "MultiLayerAdaptor",
    "MultiViewModel",
    "NonFiniteError",
    "ParamGroup",
    "Schedule",
    "SplitData",
    "SubsetAdaptor",
    "Tensor",
    "autoencoder_pretrain",
    "build_adaptor",
    "build_dataset",
    "degradation_study",
    "diversity_reg",
    "expand_channels",
    "finetune",
    "finite_diff_check",
    "inflate_first_layer",
    "invert_expansion",
    "kmeans",
    "load_tensor",
    "multiview_cells",
    "multiview_forward",
    "pretrain",
    "replace_head",
    "restore",
    "run_benchmark",
    "save_tensor",
    "scale_schedule",
    "standard_cells",
    "train_scratch",
]
__version__ = "0.1.0"
