"""The two phases of the single-point ReLU field dynamics.

For one training point, gradient flow with weight decay lambda either learns
(gamma0 > lambda: residual lambda/gamma0, field^2 = gamma0 - lambda) or collapses
(gamma0 <= lambda: residual 1, nothing learned).  This script compares the
closed form with the sampled field dynamics.

    python3 demos/fixed_point_phases.py
"""
import numpy as np

from akern import Dataset, Hyperparams
from akern.antk import DmftConfig, fixed_point_relu_single, solve_dmft_two_layer

x = np.ones((1, 8))
data = Dataset(x, np.array([1.0]))
print(" gamma0  lambda | closed Delta  <h^2>  | sampled Delta  <h^2>")
for gamma0, lam in [(0.5, 1.0), (2.0, 1.0), (4.0, 1.0), (1.0, 0.5)]:
    delta, h2 = fixed_point_relu_single(gamma0, lam)
    res = solve_dmft_two_layer(data, None, Hyperparams(gamma0, activation="relu", lambdas=(lam,)),
                               DmftConfig(T=3000, eta=1e-2, S=20000, record_every=3000))
    h = res.fields.h[0]
    print(f"  {gamma0:4.1f}   {lam:4.1f}  |   {delta:6.3f}    {h2:6.3f} |"
          f"    {float(res.delta[0]):6.3f}    {np.mean(np.maximum(h, 0) ** 2):6.3f}")
