"""Diagnostics for how well augmented training learns rotation equivariance."""
from .group import GroupElement, GroupSpec, BlockAction, build_group, make_rng, sample_uniform
from .losses import LossModel
from .metrics import LossDecomposition, EstimatorReport, decompose_exact, decompose_sampled, twirl, twist
from .models import ModelHandle, ConstantModel, init_parameters, load_parameters, save_parameters
from .tasks import SyntheticTask, make_task
from .training import TrainConfig, MetricsTimeSeries, train

__version__ = "0.1.0"
