"""EMOFM click-through-rate ensemble: WM, HM and HMM predictors with
cross-attention feature mixers, an auxiliary type model and a CLI."""

__version__ = "0.1.0"

from .dataio import FIELD_SCHEMA, Records, SyntheticSpec, generate, load_records, split_by_day, write_records
from .metrics import MetricsReport, auc, evaluate
from .models import AM, HM, HMM, WM, ModelBundle, ModelConfig, ensemble_predict
from .serialization import load_bundle, save_bundle
from .training import TrainConfig, train_am, train_predictor

__all__ = [
    "AM", "FIELD_SCHEMA", "HM", "HMM", "MetricsReport", "ModelBundle", "ModelConfig", "Records",
    "SyntheticSpec", "TrainConfig", "WM", "__version__", "auc", "ensemble_predict", "evaluate",
    "generate", "load_bundle", "load_records", "save_bundle", "split_by_day", "train_am",
    "train_predictor", "write_records",
]
