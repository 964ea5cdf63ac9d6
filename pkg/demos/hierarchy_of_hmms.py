"""Build a hierarchy over a collection of HMMs and inspect each level.

Inputs are 56 HMMs fitted to noisy copies of four references.  Levels of 8,
4 and 2 clusters are built by repeatedly reducing the previous level, so
items grouped together at one level stay together further up.

    python demos/hierarchy_of_hmms.py
"""

import argparse

import numpy as np

from h3mcluster.hierclust import SynthSpec, build_hierarchy, clustering_expected_ll, rand_index, synth_generate
from h3mcluster.vhem import VhemConfig


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--levels", type=int, nargs="+", default=[56, 8, 4, 2])
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    n = args.levels[0]
    if n % 4:
        p.error("the first level must be a multiple of 4")
    inputs, truth, _ = synth_generate(SynthSpec(K=n // 4, sigma_n2=args.noise), args.seed)
    hier = build_hierarchy(inputs, args.levels, VhemConfig(K_r=1, rng_seed=args.seed))

    for k, level in enumerate(hier.levels):
        labels = hier.labels(k)
        ell = clustering_expected_ll(inputs, level.model, labels)
        sizes = np.bincount(labels)
        print(f"level {k}: {level.model.K:3d} clusters, Rand vs references {rand_index(truth, labels):.3f}, "
              f"expected log-lik {ell:.1f}, largest cluster {sizes.max()}")
    print("top-level groups:")
    top = hier.labels(len(hier.levels) - 1)
    for j in range(top.max() + 1):
        print(f"  {j}: references {np.bincount(truth[top == j], minlength=4).tolist()}")


if __name__ == "__main__":
    main()
