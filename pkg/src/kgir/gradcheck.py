"""Finite-difference verification of analytic gradients.

`grad_check` takes a closure that rebuilds a scalar loss from a dict of
parameter tensors, compares the backward-pass gradient against central
differences on a sample of coordinates, and reports the worst relative
error.  The relative error of a coordinate is

    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12)

except that a coordinate where both values fall below `atol` counts as
agreement: central differences on a loss of order one resolve roughly
1e-10, so such a coordinate is below measurement resolution (some
parameters — an attention key bias, say — have an exactly-zero true
gradient, and comparing noise against noise is meaningless).  A missing
or spurious gradient still registers, because then one side is large.

Sampled coordinates are the ones with the largest analytic magnitude;
the dominant coordinates are exactly where a wrong backward pass shows
up.

A closure that does not reproduce the same loss twice is rejected —
finite differences are meaningless against a noisy objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

FLOOR = 1e-12


class NonDeterministicLoss(RuntimeError):
    """The closure returned different values on identical inputs."""


def randomize_params(params: dict[str, Tensor], rng: np.random.Generator,
                     std: float = 0.3) -> None:
    """Re-draw every parameter at O(std) scale, in place.

    Freshly initialised models are a degenerate point for verifying
    gradients: tiny weights make attention near-uniform and shrink some
    paths' gradients below what central differences can resolve.  A
    generic random point exercises the same backward code with healthy
    magnitudes.
    """
    for p in params.values():
        p.data = rng.normal(0.0, std, size=p.data.shape)


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def _loss_value(closure) -> float:
    out = closure()
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("grad_check closure must return a scalar Tensor")
    return float(out.data)


def grad_check(
    closure,
    params: dict[str, Tensor],
    eps: float = 1e-6,
    max_coords_per_param: int = 6,
    atol: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic and central-difference gradients of `closure`.

    Every tensor in `params` must require gradients and be an input of
    the loss the closure rebuilds.  At most `max_coords_per_param`
    coordinates per tensor are probed (all of them for small tensors,
    the largest-gradient ones otherwise).  Coordinates where both the
    analytic and the numeric value are below `atol` are recorded as
    exact agreement — see the module docstring.
    """
    base = _loss_value(closure)
    if _loss_value(closure) != base:
        raise NonDeterministicLoss(
            "loss changed between two evaluations at the same parameters; "
            "finite differences cannot be trusted"
        )

    for p in params.values():
        p.grad = None
    loss = closure()
    loss.backward()

    report = GradCheckReport(max_rel_err=0.0)
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} received no gradient")
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            magnitude = np.abs(p.grad.reshape(-1))
            coords = np.argsort(-magnitude, kind="stable")[:max_coords_per_param]
        worst = 0.0
        for c in coords:
            keep = flat[c]
            flat[c] = keep + eps
            up = _loss_value(closure)
            flat[c] = keep - eps
            down = _loss_value(closure)
            flat[c] = keep
            numeric = (up - down) / (2.0 * eps)
            analytic = p.grad.reshape(-1)[c]
            if max(abs(analytic), abs(numeric)) < atol:
                err = 0.0
            else:
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), FLOOR)
            worst = max(worst, float(err))
        report.per_param[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    return report


def _weighted(t: Tensor, w: np.ndarray) -> Tensor:
    """Reduce an op's output to a scalar with fixed random weights.

    A plain sum would hide errors wherever outputs are constrained: each
    softmax row sums to 1, so the gradient of the sum is identically
    zero no matter what the backward pass computes.
    """
    return ag.tensor_sum(ag.mul(t, Tensor(w)))


def check_primitives(seed: int = 0, **grad_check_kwargs) -> dict[str, GradCheckReport]:
    """Grad-check every differentiable primitive at a generic random point.

    Returns one report per op name.  Inputs are drawn away from the
    non-smooth points of the few ops that have them (relu's kink, div's
    pole, log's domain edge) so central differences stay valid.
    """
    rng = np.random.default_rng(seed)

    def leaf(*shape, positive=False, away_from_zero=False):
        x = rng.normal(0.0, 1.0, size=shape)
        if positive:
            x = np.abs(x) + 0.5
        if away_from_zero:
            x = x + 0.3 * np.sign(x)
        return Tensor(x, requires_grad=True)

    cases: dict[str, tuple] = {}

    def case(name, closure, **params):
        cases[name] = (closure, params)

    a1, b1 = leaf(3, 4), leaf(4)
    w1 = rng.normal(size=(3, 4))
    case("add", lambda: _weighted(ag.add(a1, b1), w1), a=a1, b=b1)

    a2, b2 = leaf(3, 4), leaf(4)
    w2 = rng.normal(size=(3, 4))
    case("mul", lambda: _weighted(ag.mul(a2, b2), w2), a=a2, b=b2)

    a3, b3 = leaf(3, 3), leaf(3, 3, away_from_zero=True)
    w3 = rng.normal(size=(3, 3))
    case("div", lambda: _weighted(ag.div(a3, b3), w3), num=a3, den=b3)

    a4 = leaf(3, 3, positive=True)
    w4 = rng.normal(size=(3, 3))
    case("power", lambda: _weighted(ag.power(a4, 2.5), w4), base=a4)

    a4b = leaf(3, 3, away_from_zero=True)
    w4b = rng.normal(size=(3, 3))
    case("power_cube", lambda: _weighted(ag.power(a4b, 3.0), w4b), base=a4b)

    a5, b5 = leaf(2, 3, 4), leaf(4, 5)
    w5 = rng.normal(size=(2, 3, 5))
    case("matmul", lambda: _weighted(ag.matmul(a5, b5), w5), a=a5, b=b5)

    a6 = leaf(2, 6)
    w6 = rng.normal(size=(3, 4))
    case("reshape", lambda: _weighted(ag.reshape(a6, (3, 4)), w6), x=a6)

    a7 = leaf(2, 3, 4)
    w7 = rng.normal(size=(2, 4, 3))
    case("swapaxes", lambda: _weighted(ag.swapaxes(a7, 1, 2), w7), x=a7)

    a8 = leaf(3, 1)
    w8 = rng.normal(size=(3, 5))
    case("broadcast_to", lambda: _weighted(ag.broadcast_to(a8, (3, 5)), w8), x=a8)

    c1, c2, c3 = leaf(2, 2), leaf(2, 3), leaf(2, 1)
    w9 = rng.normal(size=(2, 6))
    case("concat", lambda: _weighted(ag.concat([c1, c2, c3], axis=1), w9),
         a=c1, b=c2, c=c3)

    a10 = leaf(7, 3)
    idx10 = np.array([0, 2, 2, 5])          # repeats: gradients must accumulate
    w10 = rng.normal(size=(4, 3))
    case("take", lambda: _weighted(ag.take(a10, idx10), w10), x=a10)

    a11 = leaf(9, 6)
    ids11 = np.array([[1, 2, 1], [0, 3, 3]])
    w11 = rng.normal(size=(2, 3, 6))
    case("embedding", lambda: _weighted(ag.embedding(a11, ids11), w11), table=a11)

    a12 = leaf(3, 4)
    w12 = rng.normal(size=(3, 1))
    case("tensor_sum", lambda: _weighted(
        ag.tensor_sum(a12, axis=1, keepdims=True), w12), x=a12)

    a13 = leaf(3, 4)
    case("tensor_mean", lambda: ag.mul(ag.tensor_mean(a13), Tensor(1.7)), x=a13)

    a14 = leaf(3, 3)
    w14 = rng.normal(size=(3, 3))
    case("exp", lambda: _weighted(ag.exp(a14), w14), x=a14)

    a15 = leaf(3, 3, positive=True)
    w15 = rng.normal(size=(3, 3))
    case("log", lambda: _weighted(ag.log(a15), w15), x=a15)

    a16 = leaf(3, 3)
    w16 = rng.normal(size=(3, 3))
    case("tanh", lambda: _weighted(ag.tanh(a16), w16), x=a16)

    a17 = leaf(3, 3)
    w17 = rng.normal(size=(3, 3))
    case("sigmoid", lambda: _weighted(ag.sigmoid(a17), w17), x=a17)

    a18 = leaf(3, 3, away_from_zero=True)
    w18 = rng.normal(size=(3, 3))
    case("relu", lambda: _weighted(ag.relu(a18), w18), x=a18)

    a19 = leaf(3, 3)
    w19 = rng.normal(size=(3, 3))
    case("gelu", lambda: _weighted(ag.gelu(a19), w19), x=a19)

    a20 = leaf(4, 6)
    w20 = rng.normal(size=(4, 6))
    case("softmax", lambda: _weighted(ag.softmax(a20, axis=-1), w20), x=a20)

    x21 = leaf(3, 8)
    g21 = Tensor(1.0 + 0.3 * rng.normal(size=8), requires_grad=True)
    s21 = leaf(8)
    w21 = rng.normal(size=(3, 8))
    case("layer_norm", lambda: _weighted(ag.layer_norm(x21, g21, s21), w21),
         x=x21, gain=g21, shift=s21)

    a22 = leaf(6)
    labels22 = rng.integers(0, 2, size=6).astype(float)
    w22 = rng.normal(size=6)
    case("bce_with_logits",
         lambda: _weighted(ag.bce_with_logits(a22, labels22), w22), logits=a22)

    a23 = leaf(5, 7)
    targets23 = rng.integers(0, 7, size=5)
    scored23 = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    case("cross_entropy",
         lambda: ag.cross_entropy(a23, targets23, scored23), logits=a23)

    return {name: grad_check(closure, params, **grad_check_kwargs)
            for name, (closure, params) in cases.items()}


def check_alignment_loss(seed: int = 0,
                         max_coords_per_param: int = 2) -> GradCheckReport:
    """Grad-check the combined matching + masked-token loss end to end.

    Uses a toy model (width 16, one joint layer) so the full suite stays
    well under the couple-of-minutes budget while still exercising every
    layer's backward pass in composition.
    """
    from .model import AlignmentModel, ModelConfig

    cfg = ModelConfig(vocab_size=12, d_model=16, n_joint_layers=1, n_heads=2,
                      query_len=4, knowledge_len=6, n_regions=3, d_app=10,
                      align_hidden=8, n_text_layers=1)
    model = AlignmentModel(cfg, seed=seed + 1)
    rng = np.random.default_rng(seed)
    randomize_params(model.parameters(), rng)

    b = 2
    q_ids = rng.integers(5, cfg.vocab_size, size=(b, cfg.query_len))
    q_mask = np.ones((b, cfg.query_len))
    q_mask[:, -1] = 0.0
    q_ids[:, -1] = 0
    k_ids = rng.integers(5, cfg.vocab_size, size=(b, cfg.knowledge_len))
    k_mask = np.ones((b, cfg.knowledge_len))
    k_mask[:, -2:] = 0.0
    k_ids[:, -2:] = 0
    app = rng.normal(size=(b, cfg.n_regions, cfg.d_app))
    box = rng.uniform(0.0, 0.4, size=(b, cfg.n_regions, 4))
    box[..., 2:] += 0.5
    r_mask = np.ones((b, cfg.n_regions))

    labels = np.array([1.0, 0.0])
    n_text = cfg.query_len + cfg.knowledge_len
    targets = rng.integers(5, cfg.vocab_size, size=b * n_text)
    scored = np.zeros(b * n_text)
    scored[[0, 5, n_text + 2]] = 1.0

    def closure():
        out = model.forward(q_ids, q_mask, k_ids, k_mask, app, box, r_mask)
        itm = ag.tensor_mean(ag.bce_with_logits(out.align_logit, labels))
        flat = ag.reshape(out.mlm_logits, (b * n_text, cfg.vocab_size))
        return itm + ag.cross_entropy(flat, targets, scored)

    return grad_check(closure, model.parameters(),
                      max_coords_per_param=max_coords_per_param)
