"""Diagonal-covariance Gaussian mixtures fitted with EM."""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


class GmmError(ValueError):
    pass


@dataclass
class Gmm:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    variances: np.ndarray  # (K, D)
    log_likelihood_history: list[float] = field(default_factory=list)

    @property
    def n_components(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    def component_log_densities(self, x: np.ndarray) -> np.ndarray:
        """log w_k + log N(x | mu_k, diag(var_k)) for every row of x, shape (N, K)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diff = x[:, None, :] - self.means[None, :, :]
        quad = np.sum(diff * diff / self.variances[None, :, :], axis=2)
        log_norm = -0.5 * (self.dim * LOG_2PI + np.sum(np.log(self.variances), axis=1))
        with np.errstate(divide="ignore"):
            log_weights = np.log(self.weights)
        return log_weights[None, :] + log_norm[None, :] - 0.5 * quad

    def log_density(self, x: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_log_densities(x), axis=1)


def _kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(x.shape[0])]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.asarray(centers)[None, :, :]) ** 2).sum(axis=2), axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(x.shape[0])])
        else:
            centers.append(x[rng.choice(x.shape[0], p=d2 / total)])
    return np.asarray(centers)


def _initial_mixture(x: np.ndarray, k: int, floor: float, rng: np.random.Generator) -> Gmm:
    centers = _kmeans_plus_plus(x, k, rng)
    nearest = np.argmin(((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2), axis=1)
    global_var = np.maximum(x.var(axis=0), floor)
    weights = np.empty(k)
    variances = np.empty((k, x.shape[1]))
    for j in range(k):
        members = x[nearest == j]
        weights[j] = max(members.shape[0], 1)
        variances[j] = np.maximum(members.var(axis=0), floor) if members.shape[0] > 1 else global_var
    return Gmm(weights=weights / weights.sum(), means=centers.copy(), variances=variances)


def fit_gmm(
    samples: np.ndarray,
    n_components: int,
    seed: int = 0,
    max_iterations: int = 50,
    tolerance: float = 1e-6,
    variance_floor: float = 1e-6,
) -> Gmm:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n_components < 1:
        raise GmmError("A mixture needs at least one component")
    if n < n_components:
        raise GmmError(f"Cannot fit {n_components} components to {n} samples")

    if n_components == 1:
        gmm = Gmm(
            weights=np.ones(1),
            means=x.mean(axis=0)[None, :],
            variances=np.maximum(x.var(axis=0), variance_floor)[None, :],
        )
        gmm.log_likelihood_history = [float(gmm.log_density(x).sum())]
        return gmm

    rng = np.random.default_rng(seed)
    gmm = _initial_mixture(x, n_components, variance_floor, rng)
    history: list[float] = []
    for iteration in range(max_iterations):
        # E step
        joint = gmm.component_log_densities(x)
        per_sample = logsumexp(joint, axis=1)
        log_likelihood = float(per_sample.sum())
        history.append(log_likelihood)
        if len(history) > 1 and abs(history[-1] - history[-2]) <= tolerance * abs(history[-2]):
            break
        resp = np.exp(joint - per_sample[:, None])

        # M step; components without support keep their parameters
        nk = resp.sum(axis=0)
        alive = nk > 1e-10 * n
        weights = nk / n
        means = gmm.means.copy()
        variances = gmm.variances.copy()
        means[alive] = (resp[:, alive].T @ x) / nk[alive, None]
        for j in np.flatnonzero(alive):
            diff = x - means[j]
            variances[j] = np.maximum(resp[:, j] @ (diff * diff) / nk[j], variance_floor)
        gmm = Gmm(weights=weights / weights.sum(), means=means, variances=variances)
    else:
        history.append(float(gmm.log_density(x).sum()))

    logger.debug(f"EM on {n} samples, K={n_components}: {len(history)} evaluations, log-likelihood {history[-1]:.3f}")
    gmm.log_likelihood_history = history
    return gmm


def gmm_to_arrays(gmm: Gmm, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.weights": gmm.weights, f"{prefix}.means": gmm.means, f"{prefix}.variances": gmm.variances}


def gmm_from_arrays(arrays: dict[str, np.ndarray], prefix: str) -> Gmm:
    return Gmm(
        weights=arrays[f"{prefix}.weights"],
        means=arrays[f"{prefix}.means"],
        variances=arrays[f"{prefix}.variances"],
    )
