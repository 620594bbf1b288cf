"""Vulnerability grading of network assets with one-vs-rest boosted trees.

The pieces can be used on their own:

* :mod:`vulnboost.dataset` reads and encodes asset records,
* :mod:`vulnboost.smote` balances grades by synthetic oversampling,
* :mod:`vulnboost.gbdt` is a histogram gradient-boosting binary classifier,
* :mod:`vulnboost.qpso` is a quantum-behaved particle swarm minimiser,
* :mod:`vulnboost.ovr` combines 11 binary boosters into a grade predictor,
* :mod:`vulnboost.metrics` scores predictions,
* :mod:`vulnboost.pipeline` runs the whole experiment.
"""
from .dataset import FeatureSchema, encode_dataset, load_raw_csv, stratified_split, synth_dataset
from .errors import ConfigError, DataError, InvariantError, ModelFormatError, VulnBoostError
from .gbdt import GbdtModel, GbdtParams, load_model, save_model, train_binary
from .metrics import ConfusionMatrix, accuracy, confusion_matrix, macro_metrics, summary
from .ovr import OvrModel, load_ovr, predict_class, predict_encoding, save_ovr, train_ovr
from .pipeline import PipelineConfig, RunReport, run_evaluate, run_predict, run_train
from .qpso import QpsoConfig, SearchSpace, decode_params, optimize
from .smote import SmoteConfig, smote_oversample

__version__ = "0.1.0"
