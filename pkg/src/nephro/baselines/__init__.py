"""Non-LMM comparators: last value, linear trend, random forest."""

from nephro.baselines.features import FEATURE_NAMES, FeatureVector, feature_vector, training_rows
from nephro.baselines.forest import ForestConfig, ForestModel, rf_fit, rf_predict
from nephro.baselines.naive import last_value_predict, linear_trend_predict

__all__ = [
    "FEATURE_NAMES",
    "FeatureVector",
    "ForestConfig",
    "ForestModel",
    "feature_vector",
    "last_value_predict",
    "linear_trend_predict",
    "rf_fit",
    "rf_predict",
    "training_rows",
]
