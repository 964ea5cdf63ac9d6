"""Hierarchical clustering of HMMs, evaluation metrics and a synthetic benchmark."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .h3m_em import H3m, shem_h3m
from .hmm import FitConfig, Hmm, baum_welch, sample_frames
from .vhem import VhemConfig, batch_estep, vhem_reduce

#: transition matrix and initial distribution shared by all synthetic originals
SYNTH_PI = np.full(3, 1.0 / 3.0)
SYNTH_TRANS = np.array([[0.8, 0.1, 0.1], [0.2, 0.8, 0.0], [0.0, 0.2, 0.8]])
SYNTH_MEANS = {
    "means": [(1, 2, 3), (3, 2, 1), (1, 2, 2), (1, 3, 3)],
    "variances": [(1, 2, 3)] * 4,
}
SYNTH_VARS = {
    "means": [0.5, 0.5, 0.5, 0.5],
    "variances": [0.5, 0.1, 1.0, 0.05],
}

#: real sequences per base component drawn by the sampling baseline
SHEM_SAMPLES_PER_COMPONENT = 10


def rand_index(labels_a, labels_b) -> float:
    """Fraction of item pairs on which two partitions agree."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"label arrays must be 1-d and equal length, got {a.shape}, {b.shape}")
    n = a.size
    if n < 2:
        return 1.0
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)

    def pairs(x):
        return int((x * (x - 1) // 2).sum())

    total = n * (n - 1) // 2
    both = pairs(table)
    only_a = pairs(table.sum(axis=1)) - both
    only_b = pairs(table.sum(axis=0)) - both
    return (total - only_a - only_b) / total


def pair_bounds(inputs, centers: H3m, tau: int) -> np.ndarray:
    """Lower bounds on the expected log-likelihood of every input under every centre."""
    base = H3m.uniform(inputs)
    return batch_estep(base.stacked(), centers.stacked(), tau).lhmm


def clustering_expected_ll(inputs, centers: H3m, assignments, tau: int = 10) -> float:
    """Sum over inputs of the expected log-likelihood bound under the assigned centre."""
    assignments = np.asarray(assignments, dtype=int)
    if assignments.shape != (len(inputs),):
        raise ValueError("need one assignment per input")
    if np.any(assignments < 0) or np.any(assignments >= centers.K):
        raise ValueError("assignment outside the range of centres")
    L = pair_bounds(inputs, centers, tau)
    return float(L[np.arange(len(inputs)), assignments].sum())


def best_center_expected_ll(models, centers: H3m, tau: int = 10) -> float:
    """Expected-LL metric with each model assigned to its most likely centre."""
    return float(pair_bounds(models, centers, tau).max(axis=1).sum())


@dataclass(frozen=True, eq=False)
class Level:
    """One level of a hierarchy.

    ``assignments[k]`` is the cluster of this level that component ``k`` of
    the previous level belongs to (the identity on the first level).
    """

    model: H3m
    assignments: np.ndarray
    lower_bound: float | None = None
    repaired: int = 0


@dataclass(frozen=True, eq=False)
class Hierarchy:
    levels: tuple

    @property
    def sizes(self) -> list[int]:
        return [lvl.model.K for lvl in self.levels]

    def labels(self, level: int) -> np.ndarray:
        """Cluster of every input at ``level`` (0-based), composing the maps."""
        lab = np.asarray(self.levels[0].assignments)
        for lvl in self.levels[1 : level + 1]:
            lab = np.asarray(lvl.assignments)[lab]
        return lab


def _make_surjective(assign, zhat):
    """Give every cluster at least one member by the cheapest single moves.

    A member of a cluster with more than one item is moved to an empty
    cluster when doing so loses the least scaled log-responsibility.
    """
    assign = assign.copy()
    K = zhat.shape[1]
    with np.errstate(divide="ignore"):
        logz = np.log(zhat)
    moved = 0
    for j in range(K):
        if np.any(assign == j):
            continue
        counts = np.bincount(assign, minlength=K)
        movable = np.flatnonzero(counts[assign] > 1)
        cost = logz[movable, assign[movable]] - logz[movable, j]
        pick = movable[np.argmin(cost)]
        assign[pick] = j
        moved += 1
    return assign, moved


def build_hierarchy(inputs, level_sizes, config: VhemConfig) -> Hierarchy:
    """Cluster ``inputs`` recursively into levels of decreasing size.

    The first level holds the inputs themselves with uniform weights.  If
    ``level_sizes[0]`` is smaller than ``len(inputs)`` the input level is
    added in front.  Each further level reduces the previous one with
    :func:`vhem_reduce`; ``config.K_r`` is overridden per level.
    """
    inputs = list(inputs)
    sizes = [int(k) for k in level_sizes]
    if not sizes or not inputs:
        raise ValueError("need at least one input and one level size")
    if sizes[0] > len(inputs):
        raise ValueError(f"first level size {sizes[0]} exceeds the {len(inputs)} inputs")
    if sizes[0] < len(inputs):
        sizes = [len(inputs)] + sizes
    if any(b >= a for a, b in zip(sizes, sizes[1:])) or sizes[-1] < 1:
        raise ValueError(f"level sizes must be strictly decreasing and positive, got {sizes}")

    current = H3m.uniform(inputs)
    levels = [Level(current, np.arange(len(inputs)))]
    seeds = np.random.SeedSequence(config.rng_seed).spawn(len(sizes) - 1)
    for k, seed in zip(sizes[1:], seeds):
        cfg = dataclasses.replace(config, K_r=k, rng_seed=int(seed.generate_state(1)[0]))
        reduced, state, result = vhem_reduce(current, cfg)
        assign, moved = _make_surjective(result.assignments, state.zhat)
        if not np.array_equal(np.unique(assign), np.arange(k)):
            raise RuntimeError(f"level with {k} clusters has empty clusters")
        levels.append(Level(reduced, assign, result.lower_bound, moved))
        current = reduced
    return Hierarchy(tuple(levels))


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic benchmark: ``K`` noisy refits of each of ``C`` original HMMs."""

    C: int = 4
    K: int = 16
    sigma_n2: float = 0.1
    T: int = 100
    scenario: str = "means"

    def __post_init__(self):
        if not 2 <= self.C <= 4:
            raise ValueError("C must be between 2 and 4")
        if self.K < 1 or self.T < 2:
            raise ValueError("K must be >= 1 and T >= 2")
        if not self.sigma_n2 > 0:
            raise ValueError("sigma_n2 must be > 0")
        if self.scenario not in SYNTH_MEANS:
            raise ValueError(f"scenario must be one of {sorted(SYNTH_MEANS)}")


def synth_originals(scenario: str = "means", C: int = 4) -> list[Hmm]:
    """The original 3-state, 1-d HMMs of the synthetic benchmark."""
    out = []
    for mu, var in list(zip(SYNTH_MEANS[scenario], SYNTH_VARS[scenario]))[:C]:
        means = np.asarray(mu, dtype=float).reshape(3, 1, 1)
        covs = np.full((3, 1, 1, 1), float(var))
        out.append(Hmm(SYNTH_PI, SYNTH_TRANS, np.ones((3, 1)), means, covs))
    return out


def synth_generate(spec: SynthSpec, rng_seed: int, fit_config: FitConfig | None = None):
    """Noisy HMMs for the synthetic benchmark.

    Every noisy HMM is fitted by Baum-Welch (3 states, 1 Gaussian) to one
    sequence of length ``spec.T`` sampled from an original and corrupted by
    additive ``N(0, sigma_n2)`` noise.

    Returns
    -------
    (hmms, labels, originals) with ``labels[k]`` the index of the source original.
    """
    fit_config = fit_config or FitConfig()
    originals = synth_originals(spec.scenario, spec.C)
    seeds = np.random.SeedSequence(rng_seed).spawn(spec.C * spec.K)
    hmms, labels = [], []
    for n, seed in enumerate(seeds):
        c = n // spec.K
        rng = np.random.default_rng(seed)
        y = sample_frames(originals[c], 1, spec.T, rng)[0]
        y = y + rng.normal(0.0, np.sqrt(spec.sigma_n2), size=y.shape)
        cfg = dataclasses.replace(fit_config, rng_seed=int(rng.integers(2**31)))
        hmms.append(baum_welch([y], 3, 1, cfg))
        labels.append(c)
    return hmms, np.asarray(labels), originals


@dataclass(frozen=True, eq=False)
class ClusteringReport:
    """Outcome of clustering one synthetic data set.

    ``expected_ll`` sums, over the original HMMs, the bound on their
    expected log-likelihood under the most likely cluster centre.
    """

    rand_index: float
    expected_ll: float
    assignments: np.ndarray
    seconds: float

    def __post_init__(self):
        if not 0.0 <= self.rand_index <= 1.0:
            raise ValueError(f"rand index {self.rand_index} outside [0, 1]")


def cluster_synthetic(spec: SynthSpec, rng_seed: int, method: str = "vhem", *,
                      vhem_config: VhemConfig | None = None, fit_config: FitConfig | None = None,
                      shem_N: int | None = None) -> ClusteringReport:
    """Generate one synthetic data set and cluster it into ``spec.C`` groups."""
    gen_seed, run_seed = np.random.SeedSequence(rng_seed).spawn(2)
    hmms, labels, originals = synth_generate(spec, int(gen_seed.generate_state(1)[0]), fit_config)
    base = H3m.uniform(hmms)
    seed = int(run_seed.generate_state(1)[0])
    vcfg = vhem_config or VhemConfig(K_r=spec.C)
    vcfg = dataclasses.replace(vcfg, K_r=spec.C, rng_seed=seed)
    start = time.perf_counter()
    if method == "vhem":
        centers, _, result = vhem_reduce(base, vcfg)
        assign = result.assignments
    elif method == "shem":
        N = shem_N or SHEM_SAMPLES_PER_COMPONENT * base.K
        cfg = dataclasses.replace(fit_config or FitConfig(), rng_seed=seed)
        centers, assign = shem_h3m(base, spec.C, N, vcfg.tau, cfg, rng_seed=seed)
    else:
        raise ValueError(f"unknown method {method!r}")
    seconds = time.perf_counter() - start
    return ClusteringReport(
        rand_index=rand_index(labels, assign),
        expected_ll=best_center_expected_ll(originals, centers, vcfg.tau),
        assignments=np.asarray(assign),
        seconds=seconds,
    )


SWEEP_K = (2, 4, 8, 16, 32)
SWEEP_NOISE = (0.1, 0.5, 1.0)
SWEEP_COLUMNS = ("v", "method", "scenario", "K", "sigma_n2", "trial", "seed",
                 "rand", "expected_ll", "seconds")


def sweep_cells(Ks=SWEEP_K, noises=SWEEP_NOISE, scenarios=("means",), methods=("vhem",),
                trials: int = 10, seed: int = 0):
    """Jobs of a sweep as ``(method, SynthSpec, trial, cell_seed)`` in a fixed order.

    The cell seed depends only on the master seed and the cell's position in
    the grid, so it does not change with the number of workers.
    """
    jobs = []
    for s_idx, scenario in enumerate(scenarios):
        for k_idx, K in enumerate(Ks):
            for n_idx, noise in enumerate(noises):
                spec = SynthSpec(K=int(K), sigma_n2=float(noise), scenario=scenario)
                for trial in range(trials):
                    ss = np.random.SeedSequence([seed, s_idx, k_idx, n_idx, trial])
                    cell_seed = int(ss.generate_state(1)[0])
                    for method in methods:
                        jobs.append((method, spec, trial, cell_seed))
    return jobs


def run_job(job, vhem_config: VhemConfig | None = None) -> dict:
    method, spec, trial, cell_seed = job
    rep = cluster_synthetic(spec, cell_seed, method, vhem_config=vhem_config)
    return {
        "v": 1, "method": method, "scenario": spec.scenario, "K": spec.K,
        "sigma_n2": repr(spec.sigma_n2), "trial": trial, "seed": cell_seed,
        "rand": rep.rand_index, "expected_ll": rep.expected_ll, "seconds": rep.seconds,
    }
