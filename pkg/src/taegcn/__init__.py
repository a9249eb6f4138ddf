"""Spatio-temporal forecasting with an attention-driven evolving node graph.

The model couples per-node causal self-attention over time, a recurrent
pair scorer that re-estimates a directed adjacency for every period of the
input window, and graph convolutions that mix node features under those
adjacencies. Everything trains end to end on an in-repo reverse-mode
autodiff engine over float64 numpy, tuned for bit-reproducibility rather
than speed.
"""

from .data import (
    NormStats,
    RegimeSpec,
    SeriesDataset,
    SynthSpec,
    Window,
    chronological_split,
    compute_norm_stats,
    load_csv,
    make_windows,
    normalize,
    synth_generate,
    write_csv,
)
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DivergenceError,
    ShapeError,
    TaegcnError,
    UsageError,
)
from .estimator import TaegcnForecaster
from .network import (
    ModelConfig,
    TaegcnNetwork,
    load_checkpoint,
    masked_mae_loss,
    save_checkpoint,
)
from .training import (
    ABLATION_VARIANTS,
    MetricsReport,
    TrainConfig,
    TrainHistory,
    build_ablation,
    evaluate,
    fit,
    persistence_forecast,
    predict_windows,
)

__version__ = "0.1.0"

__all__ = [
    "ABLATION_VARIANTS",
    "ConfigError",
    "ContractError",
    "DataError",
    "DivergenceError",
    "MetricsReport",
    "ModelConfig",
    "NormStats",
    "RegimeSpec",
    "SeriesDataset",
    "ShapeError",
    "SynthSpec",
    "TaegcnError",
    "TaegcnForecaster",
    "TaegcnNetwork",
    "TrainConfig",
    "TrainHistory",
    "UsageError",
    "Window",
    "build_ablation",
    "chronological_split",
    "compute_norm_stats",
    "evaluate",
    "fit",
    "load_checkpoint",
    "load_csv",
    "make_windows",
    "masked_mae_loss",
    "normalize",
    "persistence_forecast",
    "predict_windows",
    "save_checkpoint",
    "synth_generate",
    "write_csv",
    "__version__",
]
