"""Model parameters, the action function, and the forward generative process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .dcn import DcnBuilder
from .domain import SECONDS_PER_DAY, ActionSequence, DomainCatalog, Hyperparams, DataError


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def logsumexp(a: np.ndarray, axis=None, keepdims: bool = False):
    """Lean log-sum-exp for finite-maximum inputs (scipy's version dominates sampler time)."""
    m = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def sample_log_dirichlet(rng: np.random.Generator, alpha: np.ndarray) -> np.ndarray:
    """Log of a Dirichlet draw, safe for tiny concentrations.

    Uses ``G_a = G_{a+1} * U**(1/a)`` in log space, so components whose gamma
    variate underflows in linear space still get a finite log value.
    """
    alpha = np.asarray(alpha, dtype=float)
    g = rng.standard_gamma(alpha + 1.0)
    u = 1.0 - rng.random(alpha.shape)
    log_g = np.log(g) + np.log(u) / alpha
    return log_g - logsumexp(log_g)


def sample_dirichlet(rng: np.random.Generator, alpha: np.ndarray) -> np.ndarray:
    p = np.exp(sample_log_dirichlet(rng, alpha))
    return p / p.sum()


def log_dirichlet_pdf(log_p: np.ndarray, alpha: np.ndarray) -> float:
    return float(gammaln(alpha.sum()) - gammaln(alpha).sum() + np.dot(alpha - 1.0, log_p))


def action_function(z, rank, row_max, K: int):
    """``exp(-(z - rank / row_max * K) ** 2)``; broadcasts over array arguments."""
    return np.exp(log_action_function(z, rank, row_max, K))


def log_action_function(z, rank, row_max, K: int):
    return -(np.asarray(z, dtype=float) - np.asarray(rank) / np.asarray(row_max) * K) ** 2


def action_distribution(z: int, phi: np.ndarray, dcn_row: np.ndarray, K: int) -> np.ndarray:
    """P(x = j | z, phi) for every candidate j at one position."""
    with np.errstate(divide="ignore"):
        log_w = np.log(phi) + log_action_function(z, dcn_row, dcn_row.max(), K)
    return np.exp(log_w - logsumexp(log_w))


def action_likelihood(prev_idx: int | None, cand_idx: int, z: int, phi: np.ndarray,
                      dcn_row: np.ndarray, K: int) -> float:
    """Probability of choosing ``cand_idx`` at a position with level ``z``.

    ``prev_idx`` only matters through ``dcn_row``, which was built with it as the
    predecessor; it is accepted for call-site clarity.
    """
    return float(action_distribution(z, phi, dcn_row, K)[cand_idx])


def nst(theta: np.ndarray) -> float:
    """Mean novelty-seeking level ``sum_k k * theta_k`` with levels numbered from 1."""
    theta = np.asarray(theta, dtype=float)
    return float(np.dot(np.arange(1, len(theta) + 1), theta))


@dataclass
class UserModelState:
    theta: np.ndarray
    phi_s: np.ndarray
    phi_t: np.ndarray
    z_s: np.ndarray  # levels in [1, K]
    z_t: np.ndarray

    @property
    def K(self) -> int:
        return len(self.theta)

    def check(self, atol: float = 1e-9) -> None:
        for name in ("theta", "phi_s", "phi_t"):
            v = getattr(self, name)
            if len(v) and (np.any(v < 0) or abs(v.sum() - 1.0) > atol):
                raise ValueError(f"{name} is not a probability vector")
        for name in ("z_s", "z_t"):
            z = getattr(self, name)
            if len(z) and (z.min() < 1 or z.max() > self.K):
                raise ValueError(f"{name} has levels outside [1, {self.K}]")

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("theta", "phi_s", "phi_t", "z_s", "z_t")}

    @classmethod
    def from_dict(cls, d: dict) -> "UserModelState":
        return cls(np.asarray(d["theta"], float), np.asarray(d["phi_s"], float),
                   np.asarray(d["phi_t"], float), np.asarray(d["z_s"], np.int64),
                   np.asarray(d["z_t"], np.int64))


def _generate_domain(rng, catalog, user_id, theta, log_phi, n, K, t0, delta):
    builder = DcnBuilder(catalog)
    phi = np.exp(log_phi)
    z = rng.choice(K, size=n, p=theta) + 1
    xs = np.empty(n, dtype=np.int64)
    for i in range(n):
        row = builder.row()
        log_w = log_phi + log_action_function(z[i], row, row.max(), K)
        p = np.exp(log_w - logsumexp(log_w))
        xs[i] = rng.choice(catalog.M, p=p / p.sum())
        builder.push(int(xs[i]))
    ts = t0 + delta * np.arange(1, n + 1)
    return ActionSequence.from_indices(user_id, catalog.domain_id, xs, ts), phi / phi.sum(), z


def generate(catalog_s: DomainCatalog, catalog_t: DomainCatalog, hp: Hyperparams,
             N_s: int, N_t: int, seed=None, *, theta: np.ndarray | None = None,
             user_id: str = "u0", delta_seconds: int = SECONDS_PER_DAY,
             target_offset_seconds: int = 0):
    """Draw one user's coupled source/target sequences from the shared-trait model.

    ``theta`` fixes the level distribution instead of drawing it from ``Dirichlet(beta)``.
    Source action ``i`` (1-based) is stamped ``i * delta_seconds``; target action ``i``
    is stamped ``target_offset_seconds + i * delta_seconds``.

    Returns ``((seq_s, seq_t), state)`` with the latent ground truth.
    """
    if N_s < 0 or N_t < 0:
        raise DataError("sequence lengths must be non-negative")
    rng = as_rng(seed)
    K = hp.K
    if theta is None:
        theta = sample_dirichlet(rng, hp.beta)
    else:
        theta = np.asarray(theta, dtype=float)
        if len(theta) != K:
            raise ValueError(f"theta has length {len(theta)}, expected K={K}")
        theta = theta / theta.sum()
    log_phi_s = sample_log_dirichlet(rng, hp.alpha_s)
    seq_s, phi_s, z_s = _generate_domain(rng, catalog_s, user_id, theta, log_phi_s, N_s, K, 0, delta_seconds)
    log_phi_t = sample_log_dirichlet(rng, hp.alpha_t)
    seq_t, phi_t, z_t = _generate_domain(rng, catalog_t, user_id, theta, log_phi_t, N_t, K,
                                         target_offset_seconds, delta_seconds)
    return (seq_s, seq_t), UserModelState(theta, phi_s, phi_t, z_s, z_t)


def score_row(dcn_row: np.ndarray, theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Next-choice probabilities with the level marginalized under ``theta``."""
    K = len(theta)
    levels = np.arange(1, K + 1)[:, None]
    with np.errstate(divide="ignore"):
        log_w = np.log(phi)[None, :] + log_action_function(levels, dcn_row[None, :], dcn_row.max(), K)
    probs = np.exp(log_w - logsumexp(log_w, axis=1, keepdims=True))
    scores = theta @ probs
    return scores / scores.sum()


def score_next(history: ActionSequence, catalog: DomainCatalog, theta: np.ndarray,
               phi: np.ndarray) -> np.ndarray:
    if history.N == 0:
        raise DataError("score_next needs a non-empty history (no context)")
    builder = DcnBuilder(catalog)
    for a in history.actions:
        builder.push(a.choice_index)
    return score_row(builder.row(), np.asarray(theta, float), np.asarray(phi, float))
