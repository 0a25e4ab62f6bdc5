"""
Stochastic binarization of a model update
=========================================

Each coordinate of an update is mapped to +alpha or -alpha. Inside the
clamp the choice is random, weighted so the result is unbiased.
"""

import numpy as np

from fedbat.binarizer import StepSizeParam, binarize_backward, binarize_forward, init_step_size
from fedbat.tensor import SeededRng

rng = SeededRng(0)
m = np.array([-0.9, -0.2, 0.0, 0.05, 0.3, 1.4])

# the initial step size is the mean absolute value of the update
step = init_step_size(m)
print("alpha' =", step.alpha_prime, " alpha =", step.alpha)

# average many draws; entries inside [-alpha, alpha] come back close to m,
# the one outside the clamp is pinned to +alpha
draws = np.stack([binarize_forward(m, step, rng)[0] for _ in range(20_000)])
print("input      ", m)
print("mean draw  ", draws.mean(axis=0).round(3))
print("values seen", np.unique(draws.round(12)))

# a nonzero alpha_e rescales the step size by exp(rho * alpha_e)
bigger = StepSizeParam(step.alpha_prime, alpha_e=0.1)
print("alpha with alpha_e=0.1:", bigger.alpha)

# straight-through backward pass: the gradient passes where the input
# sat inside the clamp and is blocked elsewhere
out, record = binarize_forward(m, step, rng)
grad_m, grad_alpha_e = binarize_backward(np.ones_like(m), m, step, record)
print("grad wrt m      ", grad_m)
print("grad wrt alpha_e", grad_alpha_e)
