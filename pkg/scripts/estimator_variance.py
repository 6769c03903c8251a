"""Compare the per-draw variance of the reparameterization and control-variate gradients.

Both estimate the ELBO gradient for the packed Cholesky entries of the newest
component of a two-component mixture fitted to a small Gaussian target.

    python scripts/estimator_variance.py --draws 10000 --seed 0
"""

import argparse

import numpy as np

from lvboost import mixture as mx
from lvboost import sparse_chol as sc
from lvboost.mixture import Component, MixtureApproximation
from lvboost.optimizer import controlvariate_grad_L, reparam_terms, score_terms


class GaussianTarget:
    def __init__(self, comp):
        self.mix = MixtureApproximation.single(comp)

    def log_h(self, data, theta):
        return mx.logpdf(self.mix, theta)

    def log_h_and_grad(self, data, theta):
        lq, g, _ = mx.logpdf_and_grad(self.mix, np.atleast_2d(theta))
        return lq, g


def random_component(rng, pattern):
    packed = rng.normal(0.0, 0.4, sc.layout(pattern).size)
    return Component(sc.PartitionedMean(pattern, rng.normal(size=pattern.d)), sc.SparseCholeskyFactor(pattern, packed))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--draws", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    pattern = sc.hierarchical(1, 1)
    target = GaussianTarget(random_component(rng, pattern))
    mix = mx.split_component(MixtureApproximation.single(random_component(rng, pattern)), 0.5)
    comp, lay = mix.components[-1], sc.layout(pattern)
    a, c = reparam_terms(mix, rng.normal(size=(args.draws, pattern.d)), target, None)
    rp = -a[:, lay.rows] * c[:, lay.cols]
    rp[:, lay.is_diag] *= comp.factor.values[lay.is_diag]
    rp *= mix.weights[-1]
    pilot, _, _ = mx.sample(mix, rng, 1000)
    _, coeffs = controlvariate_grad_L(mix, pilot, target, None)
    th, _, _ = mx.sample(mix, rng, args.draws)
    f = target.log_h(None, th) - mx.logpdf(mix, th)
    cv = (f[:, None] - coeffs) * score_terms(mix, th)
    print("entry  reparam_mean  cv_mean  reparam_var  cv_var")
    for j in range(lay.size):
        print(f"{j:>5} {rp[:, j].mean():>13.5f} {cv[:, j].mean():>8.5f} {rp[:, j].var():>12.5f} {cv[:, j].var():>8.5f}")


if __name__ == "__main__":
    main()
