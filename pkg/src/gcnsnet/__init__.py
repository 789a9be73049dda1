"""Spectral graph convolutional network for time-resolved EEG motor imagery."""

from .data import SignalDataset, SplitPlan, load_dataset, make_synthetic, save_dataset, split
from .graph import CorrelationGraph, LaplacianSet, build_graph, estimate_lambda_max, laplacians, pcc_matrix
from .coarsening import CoarseningPlan, coarsen, graclus_match, masked_max_pool, permute_input
from .chebyshev import ChebConvParams, cheb_basis, cheb_conv_backward, cheb_conv_forward
from .network import ModelSpec, ParameterSet, backward, count_params, forward, init_params, parse_arch
from .training import TrainConfig, TrainReport, adam_step, cross_validate, grid, loss, train
from .metrics import EvalReport, confusion_matrix, evaluate, kappa, macro_prf, roc_auc, t_test

__version__ = "0.1.0"
