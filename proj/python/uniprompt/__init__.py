"""Graph prompt learning on frozen GCN encoders."""

from ._uniprompt import (
    Encoder,
    Graph,
    RuntimeAbort,
    SbmConfig,
    TuneConfig,
    ValidationError,
    cosine_similarity,
    gate,
    generate_sbm,
    knn_prompt_init,
    load_encoder,
    load_graph,
    main,
    pretrain,
    save_encoder,
    save_graph,
    symmetric_normalize,
    tune,
    verify_theory,
)

__all__ = [
    "Encoder",
    "Graph",
    "RuntimeAbort",
    "SbmConfig",
    "TuneConfig",
    "ValidationError",
    "cosine_similarity",
    "gate",
    "generate_sbm",
    "knn_prompt_init",
    "load_encoder",
    "load_graph",
    "main",
    "pretrain",
    "save_encoder",
    "save_graph",
    "symmetric_normalize",
    "tune",
    "verify_theory",
]
