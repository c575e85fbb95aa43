"""Simulation-free variational training of latent SDEs.

The package couples a neural latent SDE (prior drift/diffusion, Gaussian
initial state, decoder likelihood) with a posterior defined through its
time-marginals, so the variational objective can be estimated at random
times without ever integrating the SDE during training.  A conventional
backprop-through-the-solver baseline, exact Kalman oracles for the linear
benchmark, synthetic data generators and simulators round out the toolkit.
"""

from . import autodiff
from .autodiff import Dual, ShapeError, Tape, Var, backward, time_jvp
from .baseline import (
    ConventionalPosterior,
    baseline_gradients,
    baseline_training_step,
    elbo_path,
    grad_norm_vs_horizon,
    train_baseline,
)
from .datasets import (
    Dataset,
    TimeSeries,
    gen_linear,
    gen_lorenz,
    gen_lotka_volterra,
    load_dataset,
    lv_first_integral,
    save_dataset,
)
from .kalman import LinearSystemSpec, kalman_loglik, kalman_smoother_marginals
from .losses import (
    LossBreakdown,
    dsm_correspondence_check,
    kl_initial,
    nelbo_estimate,
    objective_gradients,
    residual,
    schedule_diffusion_squared,
    train,
    training_step,
)
from .model import (
    EncodedContext,
    LatentSDEModel,
    PosteriorReparam,
    conditional_ode_drift,
    load_checkpoint,
    posterior_sde_drift,
    save_checkpoint,
)
from .optim import Adam
from .simulate import (
    TrajectoryBatch,
    euler_maruyama,
    forecast,
    sample_prior,
    simulate_posterior_sde,
)

__version__ = "0.1.0"
