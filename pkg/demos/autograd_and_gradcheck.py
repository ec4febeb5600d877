"""A tour of the reverse-mode engine under everything else.

Every model in this package — text encoder, joint transformer,
alignment head — is built from the same handful of primitives over
numpy arrays.  This script builds a tiny computation by hand, pulls
gradients back through it, and then lets the finite-difference checker
vouch for the whole primitive set.

Run:  python demos/autograd_and_gradcheck.py
"""

import numpy as np

import kgir.autograd as ag
from kgir import Tensor, grad_check
from kgir.gradcheck import check_alignment_loss, check_primitives

# --- 1. define-by-run graphs ------------------------------------------------
#
# A Tensor wraps an ndarray; ops record their parents as they execute.
# Calling backward() on a scalar walks the recorded graph once in
# reverse creation order and accumulates gradients into the leaves.

rng = np.random.default_rng(0)
w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
x = Tensor(rng.normal(size=(4, 3)))

hidden = ag.tanh(ag.matmul(x, w))          # (4, 2)
loss = ag.tensor_mean(hidden * hidden)     # scalar
loss.backward()

print("loss:", float(loss.data))
print("dLoss/dw:\n", np.round(w.grad, 4))

# --- 2. one closure, two gradient computations ------------------------------
#
# grad_check re-runs a closure while nudging each parameter coordinate
# by ±eps and compares the central difference against what backward()
# produced.  Everything is float64, so agreement to ~1e-8 is normal and
# anything above 1e-4 means a broken backward rule.

report = grad_check(lambda: ag.tensor_mean(ag.tanh(ag.matmul(x, w)) ** 2),
                    {"w": w})
print(f"\nhand-built closure: max relative error {report.max_rel_err:.2e}")

# --- 3. the full verification suite ------------------------------------------
#
# check_primitives covers every differentiable op at a generic random
# point; check_alignment_loss composes them all: a toy retrieval model
# scored with both training losses at once.  This is exactly what the
# `kgir grad-check` subcommand runs.

reports = check_primitives(seed=0)
worst = max(reports.items(), key=lambda kv: kv[1].max_rel_err)
print(f"\n{len(reports)} primitives checked; "
      f"worst is {worst[0]!r} at {worst[1].max_rel_err:.2e}")

full = check_alignment_loss(seed=0)
print(f"full model + losses: max relative error {full.max_rel_err:.2e}")
