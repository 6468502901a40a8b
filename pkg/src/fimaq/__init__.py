"""Fisher-information-guided block-wise post-training quantization for toy
vision transformers, with an exact-FIM oracle and a numpy autodiff core."""

from .fim import LOSS_KINDS, FimEstimate, PerturbationBank, exact_fim
from .recon import QuantConfig, ReconConfig, quantize_model
from .zoo import SyntheticDataSpec, ToyViTConfig, evaluate_top1, gen_dataset, pretrain

__version__ = "0.1.0"

__all__ = [
    "LOSS_KINDS",
    "FimEstimate",
    "PerturbationBank",
    "QuantConfig",
    "ReconConfig",
    "SyntheticDataSpec",
    "ToyViTConfig",
    "evaluate_top1",
    "exact_fim",
    "gen_dataset",
    "pretrain",
    "quantize_model",
]
