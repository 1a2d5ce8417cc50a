"""SGD training laboratory: gradient-ensemble order parameters, learning phases, label cleaning."""
from .cleaner import (CleanerConfig, CleaningReport, Gmm1d, clean_and_continue, cleaning_threshold,
                      detect_cleaning_time, fit_gmm_em, mixture_gap)
from .data import NoisyDataset, RawDataset, corrupt_labels, load_bundled, load_idx, subset_per_class
from .ensemble import (NoiseSpectrum, OrderParams, SplitOrderParams, noise_covariance_spectrum,
                       probe_order_params, probe_split_order_params)
from .estimators import LossMixture, SGDPhaseClassifier
from .mathcore import PrngState, normal_pdf, shuffle, symmetric_eigenvalues
from .model import MlpConfig, WeightVector, init_weights, loss_and_gradient
from .trainer import (MetricsRow, TrainConfig, Timescales, extract_timescales, sgd_epoch, train,
                      two_phase_boundary)

__version__ = "0.1.0"
