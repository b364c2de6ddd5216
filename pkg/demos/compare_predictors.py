"""Lazy vs adaptive kernel predictors on a small synthetic split.

Fits NNGP, aNBK (Bayesian, Langevin-trained networks) and aNTK (gradient flow
with weight decay) on whitened inputs and prints test losses plus how far each
adapted kernel moved from its lazy counterpart.

    python3 demos/compare_predictors.py [gamma0]
"""
import sys

import numpy as np

from akern import Hyperparams, kernel_alignment
from akern import anbk, antk
from akern.data import synth_whitened_split
from akern.lazy import gp_predict, nngp_kernel

gamma0 = float(sys.argv[1]) if len(sys.argv) > 1 else 0.5
train, test = synth_whitened_split(16, 16, 64, seed=0, overlap=0.8)
P = train.P
y, y_test = train.targets, test.targets

X = np.vstack([train.inputs, test.inputs])
K = nngp_kernel(X @ X.T / X.shape[1], 1, "relu")[1].entries
gp = gp_predict(K[:P, :P], K[P:, :P], np.diag(K)[P:], y, 50.0, y_test)

hp_b = Hyperparams(gamma0, activation="relu", beta=50.0, lambdas=(1.0,))
stack = anbk.solve_anbk(train, hp_b)
k_test, _ = anbk.test_kernel_extension(stack, train, test.inputs, hp_b)
nbk = anbk.predict_anbk(stack, k_test, y, hp_b, y_test)

hp_a = Hyperparams(gamma0, activation="relu", lambdas=(0.1,))
dm = antk.solve_dmft_two_layer(train, test.inputs, hp_a,
                               antk.DmftConfig(T=3000, eta=1e-2, S=4000, record_every=500))
K_ntk = antk.final_kernel(dm)
ntk = antk.predict_antk(K_ntk, y, hp_a, y_test)

yy = np.outer(y, y)
print(f"gamma0 = {gamma0}, P = {P}")
print(f"  NNGP  test loss {gp.prediction.test_loss:.4f}")
print(f"  aNBK  test loss {nbk.test_loss:.4f}  (outer steps {stack.info['outer_iterations']})")
print(f"  aNTK  test loss {ntk.test_loss:.4f}")
print(f"  alignment with yy^T: lazy {kernel_alignment(K[:P, :P], yy):.3f}, "
      f"aNBK {kernel_alignment(stack.feature(1), yy):.3f}")
