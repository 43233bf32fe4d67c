"""Multimodal gas detection: thermal-image CNN, gas-sensor LSTM, early and late fusion."""

from .data import GasClass, GenConfig, LabeledSample, SensorFrame, ThermalFrame, gen_dataset, load_dataset, save_dataset, split
from .metrics import ClassReport, ConfusionMatrix, compare, confusion, report
from .modelfile import load_bundle, save_bundle
from .models import KINDS, ModelBundle, forward, init_bundle, late_fuse_avg, late_fuse_max, predict_class, predict_proba, train
from .optim import TrainConfig

__version__ = "0.1.0"
