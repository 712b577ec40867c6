"""Frequency-aware MLP for domain generalization, desk scale.

A self-contained numerical kit: a float64 autodiff tensor core, a 2-D
DFT over the (channel, token) feature matrix with a learnable complex
filter, SVD-based low-rank feature enhancement, momentum-teacher
distillation, and a leave-one-domain-out experiment harness over a
synthetic multi-domain dataset.
"""

from .analysis import delta_amplitude, export_csv, layer_amplitude
from .data import (
    DomainSample,
    MultiDomainDataset,
    SplitSpec,
    batch_iter,
    generate_synthetic,
    leave_one_domain_out,
    load_dataset,
    save_dataset,
)
from .fft import ComplexTensor, amplitude, complex_mul, dft2_naive, fft2, ifft2, phase
from .linalg import SVDResult, low_rank_reconstruct, m_svd_complex, svd
from .model import (
    AFFLayer,
    FAMLPModel,
    MixerLayer,
    ModelConfig,
    aff_forward,
    lff_forward,
    load_checkpoint,
    lre_forward,
    mixer_layer_forward,
    model_forward,
    parameter_count,
    patch_embed,
    save_checkpoint,
)
from .tensor import (
    Tensor,
    backward,
    cross_entropy,
    gelu,
    kl_divergence,
    layer_norm,
    load_tensor,
    log_softmax,
    no_grad,
    save_tensor,
    softmax,
)
from .training import (
    TeacherState,
    TrainConfig,
    distill_loss,
    ema_update,
    evaluate,
    fourier_augment,
    lr_at,
    rampup_weight,
    standard_augment,
    train_model,
    train_step,
)

__all__ = [
    "AFFLayer",
    "ComplexTensor",
    "DomainSample",
    "FAMLPModel",
    "MixerLayer",
    "ModelConfig",
    "MultiDomainDataset",
    "SVDResult",
    "SplitSpec",
    "TeacherState",
    "Tensor",
    "TrainConfig",
    "aff_forward",
    "amplitude",
    "backward",
    "batch_iter",
    "complex_mul",
    "cross_entropy",
    "delta_amplitude",
    "dft2_naive",
    "distill_loss",
    "ema_update",
    "evaluate",
    "export_csv",
    "fft2",
    "fourier_augment",
    "gelu",
    "generate_synthetic",
    "ifft2",
    "kl_divergence",
    "layer_amplitude",
    "layer_norm",
    "leave_one_domain_out",
    "lff_forward",
    "load_checkpoint",
    "load_dataset",
    "load_tensor",
    "log_softmax",
    "low_rank_reconstruct",
    "lr_at",
    "lre_forward",
    "m_svd_complex",
    "mixer_layer_forward",
    "model_forward",
    "no_grad",
    "parameter_count",
    "patch_embed",
    "phase",
    "rampup_weight",
    "save_checkpoint",
    "save_dataset",
    "save_tensor",
    "softmax",
    "standard_augment",
    "svd",
    "train_model",
    "train_step",
]
