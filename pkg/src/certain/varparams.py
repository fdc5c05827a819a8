"""Mean-field Gaussian variational distribution over network parameters."""
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

SCOPES = ("all", "final_layer")
# log-variance of coordinates held fixed (not sampled) under final_layer scope
FROZEN_LOG_VAR = -50.0


@dataclass
class BasePrior:
    """``N(theta_h_star, 1/tau_h)`` on encoder weights, ``N(0, 1/tau_L)`` on the head."""

    theta_h_star: np.ndarray
    tau_h: float
    tau_L: float

    def __post_init__(self):
        if not (self.tau_h > 0 and self.tau_L > 0):
            raise DomainError(f"prior precisions must be positive, got {self.tau_h}, {self.tau_L}")

    @classmethod
    def from_variance(cls, theta_h_star, prior_variance):
        if prior_variance <= 0:
            raise DomainError("prior variance must be positive")
        return cls(np.asarray(theta_h_star, dtype=np.float64), 1.0 / prior_variance,
                   1.0 / prior_variance)


@dataclass
class GaussianVariationalState:
    mu: np.ndarray
    log_var: np.ndarray
    n_h: int
    scope: str = "all"

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if self.mu.shape != self.log_var.shape or self.mu.ndim != 1:
            raise ShapeError("mu and log_var must be 1-D vectors of equal length")
        if not 0 <= self.n_h <= self.mu.size:
            raise ShapeError("partition boundary outside parameter vector")
        if self.scope not in SCOPES:
            raise ValueError(f"stochastic_scope must be one of {SCOPES}, got {self.scope!r}")

    @property
    def partition(self):
        return slice(0, self.n_h), slice(self.n_h, self.mu.size)

    @property
    def trainable(self):
        """Boolean mask of coordinates that are stochastic and optimized."""
        mask = np.ones(self.mu.size, dtype=bool)
        if self.scope == "final_layer":
            mask[:self.n_h] = False
        return mask

    @classmethod
    def from_params(cls, theta, n_h, init_log_var=-10.0, scope="all"):
        theta = np.asarray(theta, dtype=np.float64)
        log_var = np.full(theta.size, float(init_log_var))
        if scope == "final_layer":
            log_var[:n_h] = FROZEN_LOG_VAR
        return cls(theta.copy(), log_var, n_h, scope)

    def copy(self):
        return GaussianVariationalState(self.mu.copy(), self.log_var.copy(), self.n_h, self.scope)


def sample(state, rng):
    """Reparameterized draw ``theta = mu + exp(log_var / 2) * eps``.

    Returns ``(theta, eps)``; ``eps`` is needed to push gradients back to
    ``(mu, log_var)`` with :func:`pathwise_grad`. Frozen coordinates get
    ``eps = 0``.
    """
    eps = rng.standard_normal(state.mu.size)
    if state.scope == "final_layer":
        eps[:state.n_h] = 0.0
    return state.mu + np.exp(0.5 * state.log_var) * eps, eps


def pathwise_grad(state, eps, grad_theta):
    """Chain ``dL/dtheta`` through the reparameterization to ``(dL/dmu, dL/dlog_var)``."""
    g_mu = grad_theta.copy()
    g_lv = grad_theta * eps * 0.5 * np.exp(0.5 * state.log_var)
    return g_mu, g_lv


def _kl_terms(mu, log_var, mean, tau):
    var = np.exp(log_var)
    return 0.5 * (tau * var + tau * (mu - mean) ** 2 - 1.0 - np.log(tau) - log_var)


def kl_to_prior(state, prior):
    """Analytic ``(KL_h, KL_L)`` of the variational state against the base prior.

    Under ``final_layer`` scope the encoder coordinates are point masses held at
    the prior mean and contribute no KL term.
    """
    if not (prior.tau_h > 0 and prior.tau_L > 0):
        raise DomainError("prior precisions must be positive")
    sh, sl = state.partition
    theta_h_star = np.asarray(prior.theta_h_star)
    if theta_h_star.shape != (state.n_h,):
        raise ShapeError(f"theta_h_star has shape {theta_h_star.shape}, expected ({state.n_h},)")
    kl_l = float(np.sum(_kl_terms(state.mu[sl], state.log_var[sl], 0.0, prior.tau_L)))
    if state.scope == "final_layer":
        return 0.0, kl_l
    kl_h = float(np.sum(_kl_terms(state.mu[sh], state.log_var[sh], theta_h_star, prior.tau_h)))
    return kl_h, kl_l


def kl_grad(state, prior):
    """Gradient of ``KL_h + KL_L`` w.r.t. ``(mu, log_var)``."""
    sh, sl = state.partition
    mean = np.concatenate([np.asarray(prior.theta_h_star, dtype=np.float64),
                           np.zeros(state.mu.size - state.n_h)])
    tau = np.empty(state.mu.size)
    tau[sh] = prior.tau_h
    tau[sl] = prior.tau_L
    g_mu = tau * (state.mu - mean)
    g_lv = 0.5 * (tau * np.exp(state.log_var) - 1.0)
    if state.scope == "final_layer":
        g_mu[sh] = 0.0
        g_lv[sh] = 0.0
    return g_mu, g_lv


def log_normal(x, mean, log_var):
    return -0.5 * (np.log(2 * np.pi) + log_var + (x - mean) ** 2 / np.exp(log_var))


def kl_monte_carlo(state, prior, n_samples, rng, return_stderr=False):
    """Monte Carlo estimate of ``E_q[log q - log p]`` summed over all coordinates.

    Only used to check :func:`kl_to_prior`. Ignores ``scope``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    sh, sl = state.partition
    mean = np.concatenate([np.asarray(prior.theta_h_star, dtype=np.float64),
                           np.zeros(state.mu.size - state.n_h)])
    prior_lv = np.empty(state.mu.size)
    prior_lv[sh] = -np.log(prior.tau_h)
    prior_lv[sl] = -np.log(prior.tau_L)
    eps = rng.standard_normal((n_samples, state.mu.size))
    theta = state.mu + np.exp(0.5 * state.log_var) * eps
    log_ratio = (log_normal(theta, state.mu, state.log_var)
                 - log_normal(theta, mean, prior_lv)).sum(axis=1)
    est = float(log_ratio.mean())
    if return_stderr:
        return est, float(log_ratio.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    return est
