"""Hidden Markov models with GMM emissions.

All recursions run in the log domain.  The forward and backward passes
are batched over sequences of equal length; a sequence collection of
mixed lengths is processed one length-group at a time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .gaussian import COV_FLOOR, GMM, _frozen, floor_covariance, gaussian_logpdf

#: probabilities below this are treated as this value when taking logs
PROB_FLOOR = 1e-300


@dataclass(frozen=True)
class FitConfig:
    """Settings shared by Baum-Welch and EM-H3M."""

    max_iters: int = 100
    tol: float = 1e-5
    cov_floor: float = COV_FLOOR
    covariance_type: str = "full"
    rng_seed: int = 0
    init_iters: int = 10

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.covariance_type not in ("full", "diag"):
            raise ValueError(f"unknown covariance_type {self.covariance_type!r}")


@dataclass(frozen=True, eq=False)
class Sequence:
    """An observed time series ``frames`` of shape ``(T, d)``."""

    frames: np.ndarray
    id: str = ""

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=float)
        if f.ndim == 1:
            f = f[:, None]
        if f.ndim != 2 or f.shape[0] < 1:
            raise ValueError(f"frames must be a non-empty (T, d) array, got shape {f.shape}")
        object.__setattr__(self, "frames", _frozen(f))

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def d(self) -> int:
        return self.frames.shape[1]


def _check_stochastic(p, name, axis=-1, tol=1e-12):
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=axis) - 1.0) > tol):
        raise ValueError(f"{name} must be non-negative and sum to 1 along axis {axis}")


@dataclass(frozen=True, eq=False)
class Hmm:
    """HMM with ``S`` states and an ``M``-component GMM per state.

    Attributes
    ----------
    pi : (S,) initial state distribution
    trans : (S, S) row-stochastic transition matrix
    weights : (S, M) emission mixture weights
    means : (S, M, d)
    covs : (S, M, d, d)
    """

    pi: np.ndarray
    trans: np.ndarray
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        pi = np.atleast_1d(np.asarray(self.pi, dtype=float))
        trans = np.atleast_2d(np.asarray(self.trans, dtype=float))
        w = np.asarray(self.weights, dtype=float)
        means = np.asarray(self.means, dtype=float)
        covs = np.asarray(self.covs, dtype=float)
        S = pi.size
        if w.ndim == 1:
            w = w[:, None]
        if means.ndim == 2:
            means = means[:, :, None]
        if covs.ndim == 2:
            covs = covs[:, :, None, None]
        M, d = means.shape[1], means.shape[2]
        if (
            trans.shape != (S, S)
            or w.shape != (S, M)
            or means.shape != (S, M, d)
            or covs.shape != (S, M, d, d)
        ):
            raise ValueError(
                f"inconsistent HMM shapes pi={pi.shape} trans={trans.shape} "
                f"weights={w.shape} means={means.shape} covs={covs.shape}"
            )
        _check_stochastic(pi, "pi")
        _check_stochastic(trans, "trans")
        _check_stochastic(w, "emission weights")
        for name, value in (("pi", pi), ("trans", trans), ("weights", w), ("means", means), ("covs", covs)):
            object.__setattr__(self, name, _frozen(value))

    @classmethod
    def from_emissions(cls, pi, trans, emissions) -> Hmm:
        emissions = list(emissions)
        if len({(g.M, g.d) for g in emissions}) != 1:
            raise ValueError("all emission GMMs must share M and d")
        return cls(
            pi,
            trans,
            np.stack([g.weights for g in emissions]),
            np.stack([g.means for g in emissions]),
            np.stack([g.covs for g in emissions]),
        )

    @property
    def S(self) -> int:
        return self.pi.size

    @property
    def M(self) -> int:
        return self.weights.shape[1]

    @property
    def d(self) -> int:
        return self.means.shape[2]

    @property
    def emissions(self) -> list[GMM]:
        return [GMM(w, m, c) for w, m, c in zip(self.weights, self.means, self.covs)]

    def permute_states(self, perm) -> Hmm:
        """The same distribution with hidden states relabelled by ``perm``."""
        perm = np.asarray(perm)
        return Hmm(
            self.pi[perm],
            self.trans[np.ix_(perm, perm)],
            self.weights[perm],
            self.means[perm],
            self.covs[perm],
        )


@dataclass(frozen=True, eq=False)
class FbStats:
    """Posteriors from one forward-backward pass."""

    log_likelihood: float
    gamma: np.ndarray  # (T, S)
    xi: np.ndarray  # (T-1, S, S)
    component_post: np.ndarray  # (T, S, M), p(mixture comp | state, y_t)


def _as_frames(seq) -> np.ndarray:
    if isinstance(seq, Sequence):
        return seq.frames
    f = np.asarray(seq, dtype=float)
    return f[:, None] if f.ndim == 1 else f


def emission_terms(model: Hmm, x: np.ndarray):
    """Per-frame log terms for frames ``x`` of shape ``(N, d)``.

    Returns ``(log_b, log_comp)`` where ``log_b[n, s] = log p(x_n | state s)``
    and ``log_comp[n, s, m] = log c_sm + log N(x_n; mu_sm, Sigma_sm)``.
    """
    if x.shape[-1] != model.d:
        raise ValueError(f"dimension mismatch: data d={x.shape[-1]}, model d={model.d}")
    S, M, d = model.S, model.M, model.d
    lp = gaussian_logpdf(x, model.means.reshape(S * M, d), model.covs.reshape(S * M, d, d))
    with np.errstate(divide="ignore"):
        log_comp = lp.reshape(-1, S, M) + np.log(model.weights)[None]
    return logsumexp(log_comp, axis=2), log_comp


def _forward(log_pi, trans, log_b):
    """Log forward messages for a batch ``log_b`` of shape ``(B, T, S)``."""
    B, T, S = log_b.shape
    la = np.empty_like(log_b)
    la[:, 0] = log_pi + log_b[:, 0]
    with np.errstate(divide="ignore"):
        for t in range(1, T):
            prev = la[:, t - 1]
            m = prev.max(axis=1, keepdims=True)
            la[:, t] = np.log(np.exp(prev - m) @ trans) + m + log_b[:, t]
    return la, logsumexp(la[:, -1], axis=1)


def _backward(trans, log_b):
    B, T, S = log_b.shape
    lb = np.zeros_like(log_b)
    with np.errstate(divide="ignore"):
        for t in range(T - 2, -1, -1):
            x = log_b[:, t + 1] + lb[:, t + 1]
            m = x.max(axis=1, keepdims=True)
            lb[:, t] = np.log(np.exp(x - m) @ trans.T) + m
    return lb


def _group_by_length(frames_list):
    groups: dict[int, list[int]] = {}
    for n, f in enumerate(frames_list):
        groups.setdefault(f.shape[0], []).append(n)
    return [
        (np.array(idx), np.stack([frames_list[i] for i in idx]))
        for _, idx in sorted(groups.items())
    ]


def sequence_logliks(model: Hmm, batches, n: int) -> np.ndarray:
    """Forward-algorithm log-likelihood of every sequence in ``batches``."""
    out = np.empty(n)
    with np.errstate(divide="ignore"):
        log_pi = np.log(model.pi)
    for idx, X in batches:
        B, T, d = X.shape
        log_b, _ = emission_terms(model, X.reshape(B * T, d))
        _, ll = _forward(log_pi, model.trans, log_b.reshape(B, T, model.S))
        out[idx] = ll
    return out


def log_likelihood(model: Hmm, seq) -> float:
    """``log p(y_{1:T} | model)`` by the forward algorithm."""
    frames = _as_frames(seq)
    return float(sequence_logliks(model, [(np.array([0]), frames[None])], 1)[0])


def forward_backward(model: Hmm, seq) -> FbStats:
    frames = _as_frames(seq)
    T = frames.shape[0]
    log_b, log_comp = emission_terms(model, frames)
    with np.errstate(divide="ignore"):
        log_pi = np.log(model.pi)
        log_A = np.log(model.trans)
    la, ll = _forward(log_pi, model.trans, log_b[None])
    lb = _backward(model.trans, log_b[None])
    la, lb, ll = la[0], lb[0], float(ll[0])
    gamma = np.exp(la + lb - ll)
    gamma /= gamma.sum(axis=1, keepdims=True)
    if T > 1:
        xi = np.exp(
            la[:-1, :, None] + log_A[None] + (log_b[1:] + lb[1:])[:, None, :] - ll
        )
        xi /= xi.sum(axis=(1, 2), keepdims=True)
    else:
        xi = np.zeros((0, model.S, model.S))
    comp_post = np.exp(log_comp - log_b[:, :, None])
    return FbStats(ll, gamma, xi, comp_post)


class SeqStats(NamedTuple):
    """Per-sequence expected sufficient statistics (leading axis = sequence)."""

    loglik: np.ndarray  # (n,)
    init: np.ndarray  # (n, S)
    trans: np.ndarray  # (n, S, S)
    occ: np.ndarray  # (n, S, M)
    first: np.ndarray  # (n, S, M, d), moments of (y - ref)
    second: np.ndarray  # (n, S, M, d, d)
    ref: np.ndarray  # (d,)


def sequence_stats(model: Hmm, batches, n: int, ref: np.ndarray) -> SeqStats:
    S, M, d = model.S, model.M, model.d
    ll = np.empty(n)
    init = np.empty((n, S))
    trans = np.zeros((n, S, S))
    occ = np.empty((n, S, M))
    first = np.empty((n, S, M, d))
    second = np.empty((n, S, M, d, d))
    with np.errstate(divide="ignore"):
        log_pi = np.log(model.pi)
        log_A = np.log(model.trans)
    for idx, X in batches:
        B, T, _ = X.shape
        log_b, log_comp = emission_terms(model, X.reshape(B * T, d))
        log_b = log_b.reshape(B, T, S)
        log_comp = log_comp.reshape(B, T, S, M)
        la, lls = _forward(log_pi, model.trans, log_b)
        lb = _backward(model.trans, log_b)
        log_gamma = la + lb - lls[:, None, None]
        # (B, T, S, M) joint posterior of state and mixture component
        post = np.exp(log_gamma[..., None] + log_comp - log_b[..., None])
        ll[idx] = lls
        init[idx] = np.exp(log_gamma[:, 0])
        if T > 1:
            with np.errstate(invalid="ignore"):
                lx = (
                    la[:, :-1, :, None]
                    + log_A[None, None]
                    + (log_b[:, 1:] + lb[:, 1:])[:, :, None, :]
                    - lls[:, None, None, None]
                )
            trans[idx] = np.exp(lx).sum(axis=1)
        Y = X - ref
        occ[idx] = post.sum(axis=1)
        first[idx] = np.einsum("btsm,btd->bsmd", post, Y)
        second[idx] = np.einsum("btsm,btd,bte->bsmde", post, Y, Y)
    return SeqStats(ll, init, trans, occ, first, second, ref)


def _normalize_rows(num, fallback):
    den = num.sum(axis=-1, keepdims=True)
    ok = den > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(ok, num / np.where(ok, den, 1.0), fallback)
    return out


def weighted_update(model: Hmm, stats: SeqStats, w: np.ndarray, config: FitConfig) -> Hmm:
    """M-step from per-sequence statistics weighted by ``w``.

    Parameters whose expected counts are exactly zero keep their old value.
    """
    w = np.asarray(w, dtype=float)
    pi = _normalize_rows(w @ stats.init, model.pi)
    A = _normalize_rows(np.einsum("n,nij->ij", w, stats.trans), model.trans)
    # keep estimated zeros from becoming absorbing
    A = np.maximum(A, PROB_FLOOR)
    A /= A.sum(axis=1, keepdims=True)
    occ = np.einsum("n,nsm->sm", w, stats.occ)
    c = _normalize_rows(occ, model.weights)
    first = np.einsum("n,nsmd->smd", w, stats.first)
    second = np.einsum("n,nsmde->smde", w, stats.second)
    ok = occ > 0
    safe = np.where(ok, occ, 1.0)
    mu_c = first / safe[..., None]
    cov = second / safe[..., None, None] - np.einsum("smd,sme->smde", mu_c, mu_c)
    if config.covariance_type == "diag":
        cov = cov * np.eye(model.d)
    cov = floor_covariance(cov, config.cov_floor)
    means = np.where(ok[..., None], mu_c + stats.ref, model.means)
    covs = np.where(ok[..., None, None], cov, model.covs)
    return Hmm(pi, A, c, means, covs)


def _fit_gmm(data, M, rng, config: FitConfig):
    """Short EM for a GMM on ``data`` (N, d); returns (weights, means, covs)."""
    N, d = data.shape
    mean = data.mean(axis=0)
    diff = data - mean
    cov = diff.T @ diff / N
    if config.covariance_type == "diag":
        cov = np.diag(np.diag(cov))
    cov = floor_covariance(cov, config.cov_floor)
    if M == 1:
        return np.ones(1), mean[None], cov[None]
    means = data[rng.choice(N, size=M, replace=N < M)].copy()
    covs = np.repeat(cov[None], M, axis=0)
    weights = np.full(M, 1.0 / M)
    for _ in range(config.init_iters):
        lp = gaussian_logpdf(data, means, covs) + np.log(weights)
        r = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
        nk = r.sum(axis=0)
        keep = nk > 1e-10
        weights = np.where(keep, nk, 0.0)
        weights = weights / weights.sum()
        weights = np.maximum(weights, 1e-12)
        weights /= weights.sum()
        new_means = (r.T @ data) / np.where(keep, nk, 1.0)[:, None]
        means = np.where(keep[:, None], new_means, means)
        dm = data[:, None, :] - means[None]
        new_covs = np.einsum("nk,nkd,nke->kde", r, dm, dm) / np.where(keep, nk, 1.0)[:, None, None]
        if config.covariance_type == "diag":
            new_covs = new_covs * np.eye(d)
        covs = np.where(keep[:, None, None], floor_covariance(new_covs, config.cov_floor), covs)
    return weights, means, covs


def initial_hmm(frames_list, S: int, M: int, config: FitConfig, rng=None) -> Hmm:
    """Left-to-right block initialisation.

    Every sequence is cut into ``S`` contiguous blocks; block ``s`` of all
    sequences is pooled and a GMM fitted to it becomes state ``s``'s emission.
    """
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    pi = np.full(S, 1.0 / S)
    if S > 1:
        A = np.full((S, S), 0.2 / (S - 1))
        np.fill_diagonal(A, 0.8)
    else:
        A = np.ones((1, 1))
    everything = np.concatenate(frames_list)
    blocks = [[] for _ in range(S)]
    for f in frames_list:
        for s, part in enumerate(np.array_split(f, S)):
            if len(part):
                blocks[s].append(part)
    ws, mus, covs = [], [], []
    for s in range(S):
        data = np.concatenate(blocks[s]) if blocks[s] else everything
        w, mu, cov = _fit_gmm(data, M, rng, config)
        ws.append(w)
        mus.append(mu)
        covs.append(cov)
    return Hmm(pi, A, np.stack(ws), np.stack(mus), np.stack(covs))


def _converged(trace, tol):
    return len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * abs(trace[-2])


def baum_welch(seqs, S: int, M: int, config: FitConfig | None = None, *, init: Hmm | None = None,
               return_trace: bool = False):
    """Maximum-likelihood HMM for a list of sequences.

    Parameters
    ----------
    seqs : list of Sequence or (T, d) arrays
    S, M : number of hidden states and of mixture components per state
    config : FitConfig, optional
    init : Hmm, optional
        Starting point; defaults to :func:`initial_hmm`.
    return_trace : bool
        Also return the total log-likelihood of every visited model.

    Returns
    -------
    Hmm, or (Hmm, list of float) when ``return_trace`` is set.
    """
    config = config or FitConfig()
    frames = [_as_frames(s) for s in seqs]
    if not frames:
        raise ValueError("at least one sequence is required")
    if S < 1 or M < 1:
        raise ValueError("S and M must be >= 1")
    if len({f.shape[1] for f in frames}) != 1:
        raise ValueError("sequences disagree on dimension")
    model = init if init is not None else initial_hmm(frames, S, M, config)
    batches = _group_by_length(frames)
    n = len(frames)
    ref = np.concatenate(frames).mean(axis=0)
    ones = np.ones(n)
    trace = []
    for it in range(config.max_iters + 1):
        stats = sequence_stats(model, batches, n, ref)
        trace.append(float(stats.loglik.sum()))
        if _converged(trace, config.tol) or it == config.max_iters:
            break
        model = weighted_update(model, stats, ones, config)
    return (model, trace) if return_trace else model


def sample_frames(model: Hmm, n: int, T: int, rng, return_states: bool = False):
    """Draw ``n`` sequences of length ``T``; returns an ``(n, T, d)`` array."""
    if T < 1:
        raise ValueError("T must be >= 1")
    S, M, d = model.S, model.M, model.d
    cum_pi = np.cumsum(model.pi)
    cum_A = np.cumsum(model.trans, axis=1)
    cum_c = np.cumsum(model.weights, axis=1)
    w, v = np.linalg.eigh(model.covs)
    root = v * np.sqrt(np.maximum(w, 0.0))[..., None, :]

    states = np.empty((n, T), dtype=int)
    u = rng.random((n, T))
    states[:, 0] = np.minimum(np.searchsorted(cum_pi, u[:, 0], side="right"), S - 1)
    for t in range(1, T):
        rows = cum_A[states[:, t - 1]]
        states[:, t] = np.minimum((rows <= u[:, t, None]).sum(axis=1), S - 1)
    uc = rng.random((n, T))
    comps = np.minimum((cum_c[states] <= uc[..., None]).sum(axis=-1), M - 1)
    z = rng.standard_normal((n, T, d))
    obs = model.means[states, comps] + np.einsum("ntij,ntj->nti", root[states, comps], z)
    return (obs, states) if return_states else obs


def sample(model: Hmm, T: int, rng_seed: int) -> Sequence:
    """One sequence of length ``T``, reproducible from ``rng_seed``."""
    rng = np.random.default_rng(rng_seed)
    return Sequence(sample_frames(model, 1, T, rng)[0], id=f"sample-{rng_seed}")
