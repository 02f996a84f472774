"""Sinkhorn divergences differentiated through unrolled Sinkhorn iterations."""

from .autodiff import (
    GradientBundle,
    cost_vjp,
    finite_diff_check,
    grad_divergence_points,
    grad_points,
    grad_self_points,
    loss_and_grad_cost,
)
from .divergence import INFINITY, ZERO, DivergenceSpec, divergence, exact_ot, mmd_energy, sinkhorn_divergence
from .errors import (
    InputError,
    NonDifferentiableError,
    NumericalError,
    SinkdivError,
    StabilizationRequired,
    StabilizationWarning,
    UnsupportedInstanceError,
)
from .measures import (
    SQEUCLIDEAN,
    CostMatrix,
    DiscreteMeasure,
    GroundCost,
    cost_matrix,
    make_empirical,
    pca_project,
    sample_minibatch,
)
from .models import (
    AtomsModel,
    CostNetwork,
    EllipseModel,
    LatentSampler,
    MlpGenerator,
    clip_params,
    cost_network_matrix,
    ellipse_forward,
    mlp_forward,
    sample_latent,
)
from .sinkhorn import SinkhornState, coupling, regularized_cost, sinkhorn, sinkhorn_converged
from .training import TrainConfig, TrainTrace, adam_update, fit, minibatch_loss, rmsprop_update

__version__ = "0.1.0"
