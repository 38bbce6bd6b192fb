"""Per-user posterior inference by pointwise Gibbs sampling.

One sweep updates, in order: source levels, the shared level distribution,
source utilities, target levels, the shared level distribution again, target
utilities. Utilities have no conjugate conditional (they also appear in each
position's normalizer), so each utility update is a single Metropolis-Hastings
move with a Dirichlet proposal centred on the current value.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dcn import DcnMatrix
from .domain import ActionSequence, Hyperparams, UnfittableSequenceError
from .genmodel import (UserModelState, as_rng, log_dirichlet_pdf, logsumexp, nst,
                       sample_log_dirichlet)

PAPER_FAITHFUL = "paper_faithful"
EXACT = "exact"
PROPOSAL_FLOOR = 1e-3


def proposal_floor(alpha: np.ndarray) -> np.ndarray:
    """Per-component additive floor of the utility proposal.

    Components with negligible mass are re-proposed at prior scale; a bare 1e-3
    floor scatters their logs over hundreds of orders of magnitude and nearly
    every move is rejected.
    """
    return np.maximum(PROPOSAL_FLOOR, alpha)


@dataclass(frozen=True)
class SamplerConfig:
    burn_in: int = 2000
    samples: int = 200
    thin: int = 2
    phi_proposal_concentration: float | None = None  # None -> 500 * M per domain
    z_conditional_mode: str = EXACT
    seed: int = 0
    update_phi: bool = True
    keep_states: bool = False

    def __post_init__(self):
        if self.burn_in < 0 or self.samples < 1 or self.thin < 1:
            raise ValueError("need burn_in >= 0, samples >= 1, thin >= 1")
        if self.phi_proposal_concentration is not None and self.phi_proposal_concentration <= 0:
            raise ValueError("phi_proposal_concentration must be positive")
        if self.z_conditional_mode not in (PAPER_FAITHFUL, EXACT):
            raise ValueError(f"unknown z_conditional_mode {self.z_conditional_mode!r}")

    @property
    def sweeps(self) -> int:
        return self.burn_in + self.samples * self.thin

    def proposal_concentration(self, M: int) -> float:
        c = self.phi_proposal_concentration
        return 500.0 * M if c is None else c


@dataclass
class FitResult:
    posterior_mean_theta: np.ndarray
    posterior_mean_phi_s: np.ndarray
    posterior_mean_phi_t: np.ndarray
    nst_estimate: float
    acceptance_rate: dict = field(default_factory=dict)
    log_joint: list = field(default_factory=list)
    retained_states: list | None = None
    hyperparams: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "posterior_mean_theta": self.posterior_mean_theta.tolist(),
            "posterior_mean_phi_s": self.posterior_mean_phi_s.tolist(),
            "posterior_mean_phi_t": self.posterior_mean_phi_t.tolist(),
            "nst_estimate": self.nst_estimate,
            "acceptance_rate": self.acceptance_rate,
            "log_joint": self.log_joint,
            "hyperparams": self.hyperparams,
            "config": self.config,
        }
        if self.retained_states is not None:
            out["retained_states"] = [s.to_dict() for s in self.retained_states]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        states = d.get("retained_states")
        return cls(
            np.asarray(d["posterior_mean_theta"], float),
            np.asarray(d["posterior_mean_phi_s"], float),
            np.asarray(d["posterior_mean_phi_t"], float),
            float(d["nst_estimate"]),
            dict(d.get("acceptance_rate", {})),
            list(d.get("log_joint", [])),
            None if states is None else [UserModelState.from_dict(s) for s in states],
            dict(d.get("hyperparams", {})),
            dict(d.get("config", {})),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FitResult":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class DomainData:
    """Observed choices and precomputed log action-function values for one domain."""

    def __init__(self, seq: ActionSequence, dcn: DcnMatrix, K: int):
        if dcn.N != seq.N:
            raise ValueError(f"DCN has {dcn.N} rows but sequence has {seq.N} actions")
        self.x = seq.choice_indices
        self.N, self.M = dcn.N, dcn.M
        if self.N and self.x.max() >= self.M:
            raise ValueError("sequence choice index outside DCN width")
        levels = np.arange(1, K + 1, dtype=float)
        # log_f[k, i, j] = log f(level k+1, rank_ij); f >= exp(-K**2) so linear space is safe
        self.log_f = -(levels[:, None, None] - dcn.normalized(K)[None, :, :]) ** 2
        self.f = np.exp(self.log_f)
        self.log_f_chosen = self.log_f[:, np.arange(self.N), self.x].T  # (N, K)
        self.K = K

    def log_normalizers(self, log_phi: np.ndarray) -> np.ndarray:
        """(N, K) array of ``log sum_j phi_j f(k, rank_ij)``."""
        phi = np.exp(log_phi)
        return np.log(self.f.reshape(self.K * self.N, self.M) @ phi).reshape(self.K, self.N).T


def z_conditional(data: DomainData, log_theta: np.ndarray, log_phi: np.ndarray, mode: str) -> np.ndarray:
    """(N, K) matrix of full-conditional level probabilities for every position.

    ``paper_faithful`` weights level k by ``theta_k * phi_x * f(k, rank_x)``; ``exact``
    additionally divides by the position normalizer ``sum_j phi_j f(k, rank_j)``.
    """
    logits = log_theta[None, :] + data.log_f_chosen
    if mode == EXACT:
        logits = logits - data.log_normalizers(log_phi)
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


def _draw_categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cum[:, -1]
    return np.minimum((cum < u[:, None]).sum(axis=1), probs.shape[1] - 1)


def sample_z(pos: int, seq: ActionSequence, dcn: DcnMatrix, theta: np.ndarray, phi: np.ndarray,
             mode: str, rng) -> int:
    """Draw the level at 0-based position ``pos`` from its full conditional; returns 1..K."""
    K = len(theta)
    data = DomainData(seq, dcn, K)
    with np.errstate(divide="ignore"):
        probs = z_conditional(data, np.log(theta), np.log(phi), mode)[pos:pos + 1]
    return int(_draw_categorical(as_rng(rng), probs)[0]) + 1


def level_counts(K: int, *zs: np.ndarray) -> np.ndarray:
    """Occurrences of each level (1-based values) across all given level vectors."""
    counts = np.zeros(K, dtype=np.int64)
    for z in zs:
        counts += np.bincount(np.asarray(z, dtype=np.int64) - 1, minlength=K)[:K]
    return counts


def sample_theta(z_s: np.ndarray, z_t: np.ndarray, beta: np.ndarray, rng) -> np.ndarray:
    """Draw the shared level distribution from ``Dirichlet(beta + counts)``.

    Counts pool both domains because the level distribution is the one node the
    domains share.
    """
    beta = np.asarray(beta, dtype=float)
    log_theta = sample_log_dirichlet(as_rng(rng), beta + level_counts(len(beta), z_s, z_t))
    theta = np.exp(log_theta)
    return theta / theta.sum()


def phi_log_target(log_phi: np.ndarray, data: DomainData, z: np.ndarray, alpha: np.ndarray) -> float:
    """Unnormalized log conditional of the utilities (positions 2..N plus Dirichlet prior)."""
    if data.N < 2:
        return log_dirichlet_pdf(log_phi, alpha)
    rows = np.arange(1, data.N)
    norm = data.f[z[1:] - 1, rows, :] @ np.exp(log_phi)
    lik = log_phi[data.x[1:]].sum() - np.log(norm).sum()
    return float(lik + log_dirichlet_pdf(log_phi, alpha))


def mh_log_ratio(log_phi: np.ndarray, log_phi_prop: np.ndarray, data: DomainData, z: np.ndarray,
                 alpha: np.ndarray, c: float) -> float:
    """Metropolis-Hastings log acceptance ratio for a Dirichlet(c*phi + floor) proposal."""
    floor = proposal_floor(alpha)
    fwd = c * np.exp(log_phi) + floor
    rev = c * np.exp(log_phi_prop) + floor
    return (phi_log_target(log_phi_prop, data, z, alpha) - phi_log_target(log_phi, data, z, alpha)
            + log_dirichlet_pdf(log_phi, rev) - log_dirichlet_pdf(log_phi_prop, fwd))


def sample_phi(log_phi: np.ndarray, data: DomainData, z: np.ndarray, alpha: np.ndarray, c: float,
               rng) -> tuple[np.ndarray, bool]:
    """One MH move on the utilities, in log space. Returns ``(log_phi, accepted)``."""
    rng = as_rng(rng)
    proposal = sample_log_dirichlet(rng, c * np.exp(log_phi) + proposal_floor(alpha))
    log_r = mh_log_ratio(log_phi, proposal, data, z, alpha, c)
    if math.log(1.0 - rng.random()) < log_r:
        return proposal, True
    return log_phi, False


def log_joint(log_theta, beta, domains) -> float:
    """Log joint density of (theta, phi, z, x) with observations from position 2 on."""
    total = log_dirichlet_pdf(log_theta, beta)
    for data, log_phi, z, alpha in domains:
        total += log_theta[z - 1].sum()
        total += phi_log_target(log_phi, data, z, alpha)
        if data.N >= 2:
            total += data.log_f_chosen[np.arange(1, data.N), z[1:] - 1].sum()
    return float(total)


def fit(seq_s: ActionSequence, seq_t: ActionSequence | None, dcn_s: DcnMatrix,
        dcn_t: DcnMatrix | None, hp: Hyperparams, cfg: SamplerConfig,
        fixed_phi_s: np.ndarray | None = None, fixed_phi_t: np.ndarray | None = None) -> FitResult:
    """Fit one user's latent state.

    With ``seq_t=None`` this is the single-domain model on ``seq_s``; the fitted
    utilities are then reported as ``posterior_mean_phi_s``. ``fixed_phi_*``
    pins a domain's utilities (used with ``cfg.update_phi=False``).
    """
    for seq in (seq_s, seq_t):
        if seq is not None and not seq.fittable:
            raise UnfittableSequenceError(f"user {seq.user_id!r} domain {seq.domain_id!r} has N={seq.N} < 2")
    rng = as_rng(cfg.seed)
    K = hp.K
    mode = cfg.z_conditional_mode
    specs = [(DomainData(seq_s, dcn_s, K), hp.alpha_s, fixed_phi_s, "source")]
    if seq_t is not None:
        specs.append((DomainData(seq_t, dcn_t, K), hp.alpha_t, fixed_phi_t, "target"))
    for data, alpha, _, name in specs:
        if len(alpha) != data.M:
            raise ValueError(f"{name} alpha has length {len(alpha)} but catalog has {data.M} choices")

    zs = [rng.integers(1, K + 1, size=data.N) for data, *_ in specs]
    log_theta = sample_log_dirichlet(rng, hp.beta)
    log_phis = []
    for data, alpha, fixed, _ in specs:
        if fixed is not None:
            with np.errstate(divide="ignore"):
                log_phis.append(np.log(np.asarray(fixed, float)))
        else:
            log_phis.append(sample_log_dirichlet(rng, alpha))

    accepted = [0] * len(specs)
    moves = [0] * len(specs)
    trace = []
    retained = []
    sum_theta = np.zeros(K)
    sum_phi = [np.zeros(data.M) for data, *_ in specs]

    for sweep in range(cfg.sweeps):
        for d, (data, alpha, _, _) in enumerate(specs):
            probs = z_conditional(data, log_theta, log_phis[d], mode)
            zs[d] = _draw_categorical(rng, probs) + 1
            theta = sample_theta(zs[0], zs[1] if len(zs) > 1 else (), hp.beta, rng)
            with np.errstate(divide="ignore"):
                log_theta = np.log(theta)
            if cfg.update_phi:
                c = cfg.proposal_concentration(data.M)
                log_phis[d], ok = sample_phi(log_phis[d], data, zs[d], alpha, c, rng)
                accepted[d] += ok
                moves[d] += 1
        lj = log_joint(log_theta, hp.beta,
                       [(data, log_phis[d], zs[d], alpha) for d, (data, alpha, _, _) in enumerate(specs)])
        if not np.isfinite(lj):
            raise FloatingPointError(f"log joint became non-finite at sweep {sweep}")
        trace.append(lj)
        if sweep >= cfg.burn_in and (sweep - cfg.burn_in) % cfg.thin == cfg.thin - 1:
            theta = np.exp(log_theta)
            sum_theta += theta
            phis = [np.exp(lp) / np.exp(lp).sum() for lp in log_phis]
            for d, p in enumerate(phis):
                sum_phi[d] += p
            if cfg.keep_states:
                retained.append(UserModelState(
                    theta / theta.sum(), phis[0], phis[1] if len(phis) > 1 else np.zeros(0),
                    zs[0].copy(), zs[1].copy() if len(zs) > 1 else np.zeros(0, np.int64)))

    mean_theta = sum_theta / sum_theta.sum()
    mean_phis = [s / s.sum() for s in sum_phi]
    names = [name for *_, name in specs]
    return FitResult(
        posterior_mean_theta=mean_theta,
        posterior_mean_phi_s=mean_phis[0],
        posterior_mean_phi_t=mean_phis[1] if len(mean_phis) > 1 else np.zeros(0),
        nst_estimate=nst(mean_theta),
        acceptance_rate={n: (accepted[d] / moves[d] if moves[d] else None) for d, n in enumerate(names)},
        log_joint=trace,
        retained_states=retained if cfg.keep_states else None,
        hyperparams={"K": K, "alpha_s": hp.alpha_s.tolist(), "alpha_t": hp.alpha_t.tolist(),
                     "beta": hp.beta.tolist(), "tau_seconds": hp.tau_seconds},
        config=asdict(cfg),
    )
