"""Minimise a shifted sphere over the six-parameter tuning box with QPSO.

The same optimiser later tunes the boosted trees; here the fitness is cheap
so the convergence is easy to watch.
"""
import numpy as np

from vulnboost.qpso import QpsoConfig, SearchSpace, decode_params, optimize

space = SearchSpace.full()
centre, scale = (space.lo + space.hi) / 2, space.hi - space.lo


def sphere(x):
    return float(np.sum(((x - centre) / scale) ** 2))


res = optimize(sphere, space, QpsoConfig(n_particles=20, n_iterations=100, seed=0))
for it in (0, 10, 50, 100):
    print(f"iteration {it:>3}: best fitness {res.history[it]:.2e}")
print("best position decoded:", decode_params(res.best, space))
