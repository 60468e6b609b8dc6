"""Joint optic disc and cup segmentation on polar-transformed fundus images."""

from .autodiff import Tensor
from .model import LayerGraph, MNetConfig, build_mnet, forward, multi_scale_inputs
from .objective import LossReport, dice_loss_grad, dice_multilabel_loss, side_output_objective
from .polar import PolarConfig, augment_polar, region_proportion, to_cartesian, to_polar
from .postprocess import (EllipseParams, SegMasks, binarize, compute_cdr, compute_rdar, fit_ellipse,
                          largest_connected_component, vertical_diameter)
from .evaluation import (balanced_accuracy, cdr_error, overlap_error, pearson_corr, rim_mask, roc_auc)
from .trainer import TrainConfig, lr_schedule, sgd_momentum_step, train

__version__ = "0.1.0"
