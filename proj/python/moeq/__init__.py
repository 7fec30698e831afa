"""MoE post-training quantization: forge, sample, quantize and evaluate tiny MoE models."""

from ._moeq import (
    ConfigError,
    FactorizationError,
    FormatError,
    InvalidInput,
    Model,
    ModelConfig,
    UnsupportedShape,
    affinity_hessian,
    affinity_loss,
    agq_gptq,
    default_config,
    dequantize,
    ebss_generate,
    effective_config,
    expert_usage,
    forge_model,
    forward,
    gptq_quantize,
    hadamard_matrix,
    hadamard_preprocess,
    hessian,
    load_model,
    perplexity,
    quant_loss,
    rtn_quantize,
    run,
    sample_sequences,
)

__all__ = [
    "ConfigError",
    "FactorizationError",
    "FormatError",
    "InvalidInput",
    "Model",
    "ModelConfig",
    "UnsupportedShape",
    "affinity_hessian",
    "affinity_loss",
    "agq_gptq",
    "default_config",
    "dequantize",
    "ebss_generate",
    "effective_config",
    "expert_usage",
    "forge_model",
    "forward",
    "gptq_quantize",
    "hadamard_matrix",
    "hadamard_preprocess",
    "hessian",
    "load_model",
    "perplexity",
    "quant_loss",
    "rtn_quantize",
    "run",
    "sample_sequences",
]
