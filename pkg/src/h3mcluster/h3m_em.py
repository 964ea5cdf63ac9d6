"""Mixtures of HMMs estimated from sequences.

``em_h3m`` is the classic EM for a mixture of HMMs, extended so that
sequences can be tied together in groups sharing one assignment
variable.  ``shem_h3m`` clusters the components of an existing mixture
by sampling sequences from each of them and running the grouped EM.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp, softmax

from .gaussian import _frozen
from .hmm import (
    FitConfig,
    Hmm,
    Sequence,
    _as_frames,
    _converged,
    _group_by_length,
    baum_welch,
    sample_frames,
    sequence_logliks,
    sequence_stats,
    weighted_update,
)

#: responsibility mass under which an EM-H3M component counts as empty
EMPTY_MASS = 1e-8

#: Baum-Welch iterations used to warm-start a component
WARM_ITERS = 3


class Stack(NamedTuple):
    """Parameters of all mixture components as stacked arrays (leading axis K)."""

    omega: np.ndarray
    pi: np.ndarray
    trans: np.ndarray
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray


@dataclass(frozen=True, eq=False)
class H3m:
    """Mixture of ``K`` HMMs with weights ``omega``."""

    omega: np.ndarray
    components: tuple

    def __post_init__(self):
        omega = np.atleast_1d(np.asarray(self.omega, dtype=float))
        comps = tuple(self.components)
        if omega.shape != (len(comps),) or not comps:
            raise ValueError(f"{omega.size} weights for {len(comps)} components")
        if np.any(omega < 0) or abs(omega.sum() - 1.0) > 1e-12:
            raise ValueError(f"omega must be a probability vector, got {omega}")
        shapes = {(h.S, h.M, h.d) for h in comps}
        if len(shapes) != 1:
            raise ValueError(f"components must share (S, M, d), got {sorted(shapes)}")
        object.__setattr__(self, "omega", _frozen(omega))
        object.__setattr__(self, "components", comps)

    @property
    def K(self) -> int:
        return len(self.components)

    @property
    def S(self) -> int:
        return self.components[0].S

    @property
    def M(self) -> int:
        return self.components[0].M

    @property
    def d(self) -> int:
        return self.components[0].d

    def stacked(self) -> Stack:
        c = self.components
        return Stack(
            self.omega,
            np.stack([h.pi for h in c]),
            np.stack([h.trans for h in c]),
            np.stack([h.weights for h in c]),
            np.stack([h.means for h in c]),
            np.stack([h.covs for h in c]),
        )

    @classmethod
    def from_stack(cls, stack: Stack) -> H3m:
        comps = [Hmm(*params) for params in zip(*stack[1:])]
        return cls(stack.omega, comps)

    @classmethod
    def uniform(cls, hmms) -> H3m:
        hmms = list(hmms)
        return cls(np.full(len(hmms), 1.0 / len(hmms)), hmms)


@dataclass(frozen=True)
class AssignmentGroup:
    """Sequences that must be assigned to the same mixture component.

    ``members`` holds sequence ids (str) or positions in the sequence list (int).
    """

    members: tuple

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ValueError("an assignment group cannot be empty")


def _group_index(seqs, groups) -> np.ndarray:
    n = len(seqs)
    if groups is None:
        return np.arange(n)
    ids = {}
    for k, s in enumerate(seqs):
        if isinstance(s, Sequence) and s.id:
            if s.id in ids:
                raise ValueError(f"duplicate sequence id {s.id!r}")
            ids[s.id] = k
    gidx = np.full(n, -1)
    for g, group in enumerate(groups):
        for m in group.members:
            k = ids.get(m) if isinstance(m, str) else int(m)
            if k is None or not 0 <= k < n:
                raise ValueError(f"group {g} refers to unknown sequence {m!r}")
            if gidx[k] >= 0:
                raise ValueError(f"sequence {m!r} belongs to more than one group")
            gidx[k] = g
    if np.any(gidx < 0):
        raise ValueError(f"{int(np.sum(gidx < 0))} sequences are not in any group")
    return gidx


def _mixture_terms(log_omega, L, gidx, G):
    """Group log-likelihood table, group posteriors and total log-likelihood."""
    GL = np.zeros((G, L.shape[1]))
    np.add.at(GL, gidx, L)
    with np.errstate(invalid="ignore"):
        joint = log_omega[None, :] + GL
    return softmax(joint, axis=1), float(logsumexp(joint, axis=1).sum())


def em_h3m(seqs, groups, K: int, S: int, M: int, config: FitConfig | None = None, *,
           return_trace: bool = False):
    """Fit a mixture of ``K`` HMMs to sequences by EM.

    Parameters
    ----------
    seqs : list of Sequence or (T, d) arrays
    groups : list of AssignmentGroup or None
        Partition of ``seqs``; every group shares one assignment variable.
        ``None`` means one group per sequence.
    K, S, M : mixture size, states per HMM, Gaussians per state
    config : FitConfig, optional

    Returns
    -------
    (H3m, responsibilities) where ``responsibilities`` has shape
    ``(len(seqs), K)`` and is identical across members of a group.
    With ``return_trace`` the total log-likelihood per iteration is appended.
    """
    config = config or FitConfig()
    if K < 1:
        raise ValueError("K must be >= 1")
    frames = [_as_frames(s) for s in seqs]
    if not frames:
        raise ValueError("at least one sequence is required")
    gidx = _group_index(seqs, groups)
    G = int(gidx.max()) + 1
    members = [np.flatnonzero(gidx == g) for g in range(G)]
    n = len(frames)
    rng = np.random.default_rng(config.rng_seed)
    warm = dataclasses.replace(config, max_iters=min(WARM_ITERS, config.max_iters))

    def warm_start(group_ids):
        idx = np.sort(np.concatenate([members[g] for g in group_ids]))
        return baum_welch([frames[i] for i in idx], S, M, warm)

    perm = rng.permutation(G)
    comps = []
    for k in range(K):
        chosen = np.sort(perm[k::K])
        if chosen.size == 0:
            chosen = rng.choice(G, size=1)
        comps.append(warm_start(chosen))
    omega = np.full(K, 1.0 / K)

    batches = _group_by_length(frames)
    ref = np.concatenate(frames).mean(axis=0)
    trace = []
    for it in range(config.max_iters + 1):
        stats = [sequence_stats(h, batches, n, ref) for h in comps]
        L = np.stack([st.loglik for st in stats], axis=1)
        with np.errstate(divide="ignore"):
            log_omega = np.log(omega)
        resp, total = _mixture_terms(log_omega, L, gidx, G)
        trace.append(total)
        if _converged(trace, config.tol) or it == config.max_iters:
            break
        mass = resp.sum(axis=0)
        omega = mass / G
        w = resp[gidx]
        comps = [
            weighted_update(h, st, w[:, k], config) if mass[k] >= EMPTY_MASS else h
            for k, (h, st) in enumerate(zip(comps, stats))
        ]
        empty = np.flatnonzero(mass < EMPTY_MASS)
        if empty.size:
            omega, comps = _reseed_em(omega, comps, empty, L, gidx, G, members, warm_start, batches, n)

    model = H3m(omega / omega.sum(), comps)
    out = (model, resp[gidx])
    return out + (trace,) if return_trace else out


def _reseed_em(omega, comps, empty, L_old, gidx, G, members, warm_start, batches, n):
    """Replace empty components by a fit to the worst-explained group.

    A replacement is kept only if it does not lower the data log-likelihood.
    """
    with np.errstate(divide="ignore"):
        mix = logsumexp(np.log(omega)[None, :] + L_old, axis=1)
    per_group = np.bincount(gidx, weights=mix, minlength=G) / np.bincount(gidx, minlength=G)
    worst = np.argsort(per_group, kind="stable")
    L = np.stack([sequence_logliks(h, batches, n) for h in comps], axis=1)

    def total(om, LL):
        with np.errstate(divide="ignore"):
            return _mixture_terms(np.log(om), LL, gidx, G)[1]

    best = total(omega, L)
    for j, g in zip(empty, worst):
        cand = warm_start([g])
        om = omega * (1.0 - 1.0 / G) / (omega.sum() - omega[j]) if omega.sum() > omega[j] else omega
        om = om.copy()
        om[j] = 1.0 / G
        om /= om.sum()
        Lc = L.copy()
        Lc[:, j] = sequence_logliks(cand, batches, n)
        value = total(om, Lc)
        if value >= best:
            comps = list(comps)
            comps[j] = cand
            omega, L, best = om, Lc, value
    return omega, comps


def apportion(omega, N: int) -> np.ndarray:
    """Integer counts proportional to ``omega`` summing to ``N``, each at least 1.

    Floors first, then hands out the remainder by largest fractional part.
    """
    omega = np.asarray(omega, dtype=float)
    K = omega.size
    if N < K:
        raise ValueError(f"need N >= {K} to give every component a sample, got {N}")
    raw = omega * N
    counts = np.floor(raw).astype(int)
    rest = N - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    while np.any(counts == 0):
        counts[np.argmax(counts)] -= 1
        counts[np.flatnonzero(counts == 0)[0]] += 1
    return counts


def shem_h3m(base: H3m, K_r: int, N: int, T_sample: int = 10, config: FitConfig | None = None,
             rng_seed: int = 0, *, return_trace: bool = False):
    """Cluster the components of ``base`` by EM on sampled sequences.

    Every base component contributes about ``omega_i * N`` sequences of
    length ``T_sample``, all tied to one assignment variable.

    Returns
    -------
    (H3m, assignments) with ``assignments[i]`` the reduced component
    base component ``i`` is assigned to.
    """
    config = config or FitConfig()
    counts = apportion(base.omega, N)
    ss = np.random.SeedSequence(rng_seed)
    sample_seed, fit_seed = ss.spawn(2)
    child = sample_seed.spawn(base.K)
    seqs, groups = [], []
    for i, (h, c) in enumerate(zip(base.components, counts)):
        X = sample_frames(h, int(c), T_sample, np.random.default_rng(child[i]))
        ids = [f"b{i}-{k}" for k in range(int(c))]
        seqs.extend(Sequence(x, id=s) for x, s in zip(X, ids))
        groups.append(AssignmentGroup(ids))
    cfg = dataclasses.replace(config, rng_seed=int(fit_seed.generate_state(1)[0]))
    result = em_h3m(seqs, groups, K_r, base.S, base.M, cfg, return_trace=return_trace)
    model, resp = result[0], result[1]
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    assignments = np.argmax(resp[starts], axis=1)
    out = (model, assignments)
    return out + (result[2],) if return_trace else out
