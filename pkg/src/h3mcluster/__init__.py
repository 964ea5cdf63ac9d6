"""Clustering hidden Markov models with variational hierarchical EM."""

from .gaussian import (
    GMM,
    CovarianceError,
    Gaussian,
    expected_gauss_ll,
    gmm_lower_bound,
    gmm_variational_estep,
)
from .h3m_em import AssignmentGroup, H3m, em_h3m, shem_h3m
from .hierclust import (
    ClusteringReport,
    Hierarchy,
    SynthSpec,
    build_hierarchy,
    clustering_expected_ll,
    rand_index,
    synth_generate,
)
from .hmm import FitConfig, FbStats, Hmm, Sequence, baum_welch, forward_backward, log_likelihood, sample
from .vhem import (
    ClusteringResult,
    PairEstep,
    VhemConfig,
    VhemState,
    compute_zhat,
    hmm_pair_estep,
    mstep,
    vhem_reduce,
)

__version__ = "0.1.0"
