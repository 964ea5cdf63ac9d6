"""Variational hierarchical EM for reducing a mixture of HMMs.

A base mixture with ``K_b`` HMMs is summarised by a reduced mixture with
``K_r`` HMMs.  The reduced model is fitted to the expected log-likelihood
of virtual sequences drawn from the base model; the expectation is
replaced by nested variational lower bounds (GMM, HMM and mixture
levels), all of which are available in closed form or by a short
backward recursion, so no sequence is ever sampled.

Index conventions used throughout this module
---------------------------------------------
``i`` base component, ``j`` reduced component, ``beta`` base state,
``rho`` reduced state, ``m`` base Gaussian, ``l`` reduced Gaussian.
Batched arrays carry ``(i, j)`` as their two leading axes.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp, softmax

from .gaussian import COV_FLOOR, floor_covariance, pairwise_expected_loglik
from .h3m_em import H3m, Stack
from .hmm import Hmm

#: mass below which a reduced component counts as empty in the M-step
EMPTY_MASS = 1e-12

#: virtual sequences per base component when ``N_virtual`` is not given
VIRTUAL_PER_COMPONENT = 10_000

#: how many base components are tried when re-seeding an empty cluster
RESEED_CANDIDATES = 3


@dataclass(frozen=True)
class VhemConfig:
    """Settings for :func:`vhem_reduce`.

    ``N_virtual=None`` uses ``10**4 * K_b`` virtual sequences, which makes
    the cluster assignments essentially hard.
    """

    K_r: int
    N_virtual: int | None = None
    tau: int = 10
    max_iters: int = 100
    tol: float = 1e-5
    restarts: int = 3
    rng_seed: int = 0
    cov_floor: float = COV_FLOOR
    init_noise: float = 0.01

    def __post_init__(self):
        if self.K_r < 1:
            raise ValueError("K_r must be >= 1")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.N_virtual is not None and self.N_virtual < 1:
            raise ValueError("N_virtual must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.restarts < 1 or self.max_iters < 0:
            raise ValueError("restarts must be >= 1 and max_iters >= 0")

    def virtual_count(self, K_b: int) -> int:
        return self.N_virtual if self.N_virtual is not None else VIRTUAL_PER_COMPONENT * K_b


class BatchEstep(NamedTuple):
    """Variational E-step quantities for every (base, reduced) pair.

    Shapes (leading ``Kb, Kr`` omitted): ``log_eta (Sb, Sr, Mb, Mr)``,
    ``lgmm (Sb, Sr)``, ``phi1 (Sb, Sr)`` indexed ``[beta, rho]``,
    ``phi (tau-1, ., ., Sr, Sb, Sr)`` indexed ``[t, rho_prev, beta, rho]``,
    ``nu (tau, ., ., Sr, Sb)``, ``xi (tau-1, ., ., Sr, Sr, Sb)`` indexed
    ``[t, rho_prev, rho, beta]``, ``nu1_hat (Sr,)``, ``nu_hat (Sr, Sb)``,
    ``xi_hat (Sr, Sr)``; ``lhmm`` is ``(Kb, Kr)``.
    """

    log_eta: np.ndarray
    lgmm: np.ndarray
    lhmm: np.ndarray
    phi1: np.ndarray
    phi: np.ndarray
    nu: np.ndarray
    xi: np.ndarray
    nu1_hat: np.ndarray
    nu_hat: np.ndarray
    xi_hat: np.ndarray


@dataclass(frozen=True, eq=False)
class PairEstep:
    """E-step for a single base/reduced HMM pair (see :class:`BatchEstep`)."""

    lgmm: np.ndarray
    eta: np.ndarray
    phi1: np.ndarray
    phi: np.ndarray
    lhmm: float
    nu: np.ndarray
    xi: np.ndarray
    nu1_hat: np.ndarray
    nu_hat: np.ndarray
    xi_hat: np.ndarray


@dataclass(eq=False)
class VhemState:
    """Everything the M-step needs, plus the lower-bound history."""

    zhat: np.ndarray
    estep: BatchEstep
    reduced: H3m
    trace: list = field(default_factory=list)
    converged: bool = False
    reseeds: int = 0

    @property
    def lower_bound(self) -> float:
        return self.trace[-1]

    def pair(self, i: int, j: int) -> PairEstep:
        return _pair_view(self.estep, i, j)


@dataclass(frozen=True, eq=False)
class ClusteringResult:
    assignments: np.ndarray
    centers: H3m
    lower_bound: float
    n_iter: int
    converged: bool


def _stack_of(h: Hmm) -> Stack:
    return Stack(np.ones(1), h.pi[None], h.trans[None], h.weights[None], h.means[None], h.covs[None])


def _log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


def batch_estep(base: Stack, red: Stack, tau: int) -> BatchEstep:
    """Variational E-step for all base/reduced pairs at once."""
    Kb, Sb, Mb, d = base.means.shape
    Kr, Sr, Mr, d_r = red.means.shape
    if d != d_r:
        raise ValueError(f"dimension mismatch: base d={d}, reduced d={d_r}")
    if tau < 1:
        raise ValueError("tau must be >= 1")

    # GMM level: expected Gaussian log-likelihoods and responsibilities
    ell = pairwise_expected_loglik(
        base.means.reshape(-1, d), base.covs.reshape(-1, d, d),
        red.means.reshape(-1, d), red.covs.reshape(-1, d, d),
    )
    ell = ell.reshape(Kb, Sb, Mb, Kr, Sr, Mr).transpose(0, 3, 1, 4, 2, 5)
    score = ell + _log(red.weights)[None, :, None, :, None, :]
    norm = logsumexp(score, axis=-1)
    log_eta = score - norm[..., None]
    lgmm = np.einsum("ibm,ijbrm->ijbr", base.weights, norm)

    # HMM level: backward recursion, L_{tau+1} = 0
    log_A = _log(red.trans)
    Ab = base.trans
    L_next = np.zeros((Kb, Kr, Sb, Sr))
    phis = []
    for _ in range(tau - 1):
        X = lgmm + L_next
        sc = log_A[None, :, :, None, :] + X[:, :, None, :, :]
        lse = logsumexp(sc, axis=-1)
        phis.append(softmax(sc, axis=-1))
        L_next = np.einsum("ikb,ijrb->ijkr", Ab, lse)
    phis.reverse()
    X = lgmm + L_next
    sc1 = _log(red.pi)[None, :, None, :] + X
    lse1 = logsumexp(sc1, axis=-1)
    phi1 = softmax(sc1, axis=-1)
    lhmm = np.einsum("ib,ijb->ij", base.pi, lse1)

    # forward pass for the summary statistics
    nu_t = base.pi[:, None, None, :] * phi1.transpose(0, 1, 3, 2)
    nus, xis = [nu_t], []
    for phi_t in phis:
        pred = np.einsum("ijrk,ikb->ijrb", nu_t, Ab)
        xi_t = (pred[..., None] * phi_t).transpose(0, 1, 2, 4, 3)
        nu_t = xi_t.sum(axis=2)
        nus.append(nu_t)
        xis.append(xi_t)
    nu = np.stack(nus)
    xi = np.stack(xis) if xis else np.zeros((0, Kb, Kr, Sr, Sr, Sb))
    phi = np.stack(phis) if phis else np.zeros((0, Kb, Kr, Sr, Sb, Sr))
    return BatchEstep(
        log_eta=log_eta,
        lgmm=lgmm,
        lhmm=lhmm,
        phi1=phi1,
        phi=phi,
        nu=nu,
        xi=xi,
        nu1_hat=nu[0].sum(axis=-1),
        nu_hat=nu.sum(axis=0),
        xi_hat=xi.sum(axis=(0, -1)),
    )


def _pair_view(est: BatchEstep, i: int, j: int) -> PairEstep:
    return PairEstep(
        lgmm=est.lgmm[i, j],
        eta=np.exp(est.log_eta[i, j]),
        phi1=est.phi1[i, j],
        phi=est.phi[:, i, j],
        lhmm=float(est.lhmm[i, j]),
        nu=est.nu[:, i, j],
        xi=est.xi[:, i, j],
        nu1_hat=est.nu1_hat[i, j],
        nu_hat=est.nu_hat[i, j],
        xi_hat=est.xi_hat[i, j],
    )


def hmm_pair_estep(base: Hmm, reduced: Hmm, tau: int) -> PairEstep:
    """Lower bound on ``E_base[log p(y_{1:tau} | reduced)]`` and its statistics."""
    return _pair_view(batch_estep(_stack_of(base), _stack_of(reduced), tau), 0, 0)


def compute_zhat(base: H3m, reduced: H3m, lhmm, N_virtual: int):
    """Cluster responsibilities and the total lower bound.

    Returns ``(zhat, lower_bound)``; ``zhat[i, j]`` is the responsibility of
    reduced component ``j`` for base component ``i``.
    """
    lhmm = np.asarray(lhmm, dtype=float)
    n_i = N_virtual * base.omega
    sc = _log(reduced.omega)[None, :] + n_i[:, None] * lhmm
    zhat = softmax(sc, axis=1)
    return zhat, float(logsumexp(sc, axis=1).sum())


def _mstep(base: H3m, state: VhemState, cov_floor: float = COV_FLOOR):
    b = base.stacked()
    r = state.reduced.stacked()
    est = state.estep
    zhat = state.zhat
    Kb, Sb, Mb, d = b.means.shape
    Kr, Sr, Mr, _ = r.means.shape

    W = zhat * b.omega[:, None]
    mass = W.sum(axis=0)
    empty = np.flatnonzero(mass < EMPTY_MASS)
    live = mass >= EMPTY_MASS

    omega = zhat.sum(axis=0) / Kb
    omega /= omega.sum()

    def normalized(num, old):
        den = num.sum(axis=-1, keepdims=True)
        ok = (den > 0) & live.reshape((-1,) + (1,) * (num.ndim - 1))
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(ok, num / np.where(den > 0, den, 1.0), old)

    pi = normalized(np.einsum("ij,ijr->jr", W, est.nu1_hat), r.pi)
    A = normalized(np.einsum("ij,ijrs->jrs", W, est.xi_hat), r.trans)

    # weighted-sum operator weights over all (i, beta, m) for each (j, rho, l)
    wt = np.einsum(
        "ij,ijrb,ibm,ijbrml->ibmjrl", W, est.nu_hat, b.weights, np.exp(est.log_eta)
    ).reshape(Kb * Sb * Mb, Kr * Sr * Mr)
    den = wt.sum(axis=0)
    ok = (den > 0) & np.repeat(live, Sr * Mr)
    safe = np.where(ok, den, 1.0)
    ref = b.means.reshape(-1, d).mean(axis=0)
    mb = b.means.reshape(-1, d) - ref
    mu_c = (wt.T @ mb) / safe[:, None]
    second = wt.T @ (b.covs.reshape(-1, d, d) + mb[:, :, None] * mb[:, None, :]).reshape(-1, d * d)
    cov = second.reshape(-1, d, d) / safe[:, None, None] - mu_c[:, :, None] * mu_c[:, None, :]
    cov = floor_covariance(cov, cov_floor)

    c = normalized(den.reshape(Kr, Sr, Mr), r.weights)
    ok3 = ok.reshape(Kr, Sr, Mr)
    means = np.where(ok3[..., None], (mu_c + ref).reshape(Kr, Sr, Mr, d), r.means)
    covs = np.where(ok3[..., None, None], cov.reshape(Kr, Sr, Mr, d, d), r.covs)
    return H3m.from_stack(Stack(omega, pi, A, c, means, covs)), empty


def mstep(base: H3m, state: VhemState, cov_floor: float = COV_FLOOR) -> H3m:
    """Closed-form maximisation of the lower bound for fixed variational parameters.

    Components whose total responsibility mass is below ``EMPTY_MASS`` keep
    their previous parameters (the bound does not depend on them).
    """
    return _mstep(base, state, cov_floor)[0]


def _evaluate(base: H3m, bstack: Stack, model: H3m, tau: int, N: int):
    est = batch_estep(bstack, model.stacked(), tau)
    zhat, lb = compute_zhat(base, model, est.lhmm, N)
    return est, zhat, lb


def _reseed(base, bstack, model, est, zhat, lb, empty, tau, N):
    """Replace empty reduced components by poorly represented base components.

    Candidates are tried from the worst-represented base component upwards;
    a replacement is accepted only if the lower bound does not decrease.
    """
    order = np.argsort(est.lhmm.max(axis=1), kind="stable")
    accepted = 0
    for j in empty:
        for i in order[:RESEED_CANDIDATES]:
            comps = list(model.components)
            comps[j] = base.components[i]
            omega = model.omega.copy()
            rest = omega.sum() - omega[j]
            omega *= (1.0 - base.omega[i]) / rest if rest > 0 else 1.0
            omega[j] = base.omega[i]
            omega /= omega.sum()
            cand = H3m(omega, comps)
            c_est, c_zhat, c_lb = _evaluate(base, bstack, cand, tau, N)
            if c_lb >= lb:
                model, est, zhat, lb = cand, c_est, c_zhat, c_lb
                accepted += 1
                break
    return model, est, zhat, lb, accepted


def _initial_reduced(base: H3m, K_r: int, rng, noise: float) -> H3m:
    b = base.stacked()
    nz = np.flatnonzero(b.omega > 0)
    if K_r <= nz.size:
        idx = rng.choice(base.K, size=K_r, replace=False, p=b.omega)
    else:
        extra = rng.choice(base.K, size=K_r - nz.size, replace=True, p=b.omega)
        idx = np.concatenate([rng.permutation(nz), extra])
    d = base.d
    means = b.means.reshape(-1, d)
    diag = np.diagonal(b.covs.reshape(-1, d, d), axis1=1, axis2=2)
    scale = np.sqrt(means.var(axis=0) + diag.mean(axis=0))
    new_means = b.means[idx] + noise * scale * rng.standard_normal(b.means[idx].shape)
    return H3m.from_stack(
        Stack(np.full(K_r, 1.0 / K_r), b.pi[idx], b.trans[idx], b.weights[idx], new_means, b.covs[idx])
    )


def run_vhem(base: H3m, init: H3m, config: VhemConfig) -> VhemState:
    """Alternate E- and M-steps from ``init`` until the bound stalls."""
    N = config.virtual_count(base.K)
    bstack = base.stacked()
    model = init
    est, zhat, lb = _evaluate(base, bstack, model, config.tau, N)
    state = VhemState(zhat, est, model, [lb])
    for _ in range(config.max_iters):
        new, empty = _mstep(base, state, config.cov_floor)
        n_est, n_zhat, n_lb = _evaluate(base, bstack, new, config.tau, N)
        if empty.size:
            new, n_est, n_zhat, n_lb, k = _reseed(
                base, bstack, new, n_est, n_zhat, n_lb, empty, config.tau, N
            )
            state.reseeds += k
        prev = state.trace[-1]
        state.zhat, state.estep, state.reduced = n_zhat, n_est, new
        state.trace.append(n_lb)
        if abs(n_lb - prev) <= config.tol * abs(prev):
            state.converged = True
            break
    return state


def vhem_reduce(base: H3m, config: VhemConfig):
    """Cluster the components of ``base`` into ``config.K_r`` groups.

    Runs ``config.restarts`` independent initialisations and keeps the one
    with the highest final lower bound.

    Returns
    -------
    reduced : H3m
        The cluster centres.
    state : VhemState
        Final E-step, responsibilities and lower-bound trace of the best run.
    result : ClusteringResult
        Hard assignments ``argmax_j zhat[i, j]`` and summary numbers.
    """
    seeds = np.random.SeedSequence(config.rng_seed).spawn(config.restarts)
    best = None
    for seed in seeds:
        rng = np.random.default_rng(seed)
        init = _initial_reduced(base, config.K_r, rng, config.init_noise)
        state = run_vhem(base, init, config)
        if best is None or state.lower_bound > best.lower_bound:
            best = state
    result = ClusteringResult(
        assignments=np.argmax(best.zhat, axis=1),
        centers=best.reduced,
        lower_bound=best.lower_bound,
        n_iter=len(best.trace) - 1,
        converged=best.converged,
    )
    return best.reduced, best, result
