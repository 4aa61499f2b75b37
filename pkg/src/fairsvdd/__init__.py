"""Deep SVDD and adversarially debiased Deep Fair SVDD for tabular anomaly detection."""

from .data import DataError, Dataset, SynthSpec, balance_by_psv, load_csv, standardize, synth_biased, write_csv
from .fair import FairSvddModel, disc_loss, disc_predict, adv_loss, load_fair, probe_accuracy, train_fair_svdd
from .metrics import FairnessReport, TieError, auc, evaluate, p_rule, threshold_from_count, wasserstein1
from .svdd import NumericalError, SvddModel, TrainConfig, load_svdd, score, train_svdd

__version__ = "0.1.0"
