"""Daily streamflow forecasting from gridded weather with a time-distributed CNN-LSTM and an LSTM baseline."""
from .metrics import KgeComponents, compare_report, kge
from .model import CNN_LSTM, LSTM, CnnLstmConfig, LstmBaselineConfig, build_model, predict
from .training import TrainConfig, evaluate, prepare_dataset, train

__version__ = "0.1.0"
