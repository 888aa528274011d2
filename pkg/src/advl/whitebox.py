"""Epsilon-neighbourhood attack: Adam on a tanh-substituted, box-bounded image.

The attack never minimises the perturbation size. It drives the logit margin
``max_{i != t} z_i - z_t`` below zero while every pixel is confined to
``[max(x - eps, 0), min(x + eps, 1)]`` by construction:

    image = (b - a) / 2 * tanh(w + c) + (b + a) / 2

so Adam can run on ``w`` without any projection step.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from advl.metrics import l2_distortion_8bit, max_perturbation_8bit
from advl.network import value_and_input_gradient
from advl.optim import AdamState, adam_step
from advl.tensor import DTYPE, DomainError

# inward nudge (in pixel units) for starting points sitting on a box edge
EDGE_NUDGE = 1e-6
# |u| cap inside the balance offset's arctanh when 0.5 lies outside the box
OFFSET_CLIP = 1.0 - 1e-6


@dataclass
class EpsAttackConfig:
    epsilon_8bit: float = 52.0
    kappa: float = 0.0
    max_iters: int = 1000
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    abort_early: bool = True
    check_box: bool = False

    def __post_init__(self):
        if not 0 < self.epsilon_8bit <= 255:
            raise ValueError("epsilon_8bit must lie in (0, 255]")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")

    @property
    def epsilon(self):
        return self.epsilon_8bit / 255.0


@dataclass
class AttackResult:
    adversarial: np.ndarray
    success: bool
    iterations_used: int
    loss_final: float
    wall_time: float
    max_pert_8bit: float
    l2_distortion_8bit: float
    target: int = -1
    queries: int = 0
    extra: dict = field(default_factory=dict, repr=False)


@dataclass
class SubstitutionFrame:
    """Box corners ``a``/``b`` and balance offset ``c`` for one image (or batch)."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    w: np.ndarray = None

    @property
    def degenerate(self):
        return self.b <= self.a

    def subset(self, index):
        return SubstitutionFrame(self.a[index], self.b[index], self.c[index],
                                 None if self.w is None else self.w[index])


def eps_bounds(x, eps):
    """``a = max(x - eps, 0)``, ``b = min(x + eps, 1)``."""
    x = np.asarray(x, dtype=DTYPE)
    return np.maximum(x - eps, 0.0), np.minimum(x + eps, 1.0)


def balance_offset(a, b):
    """``c = -arctanh((b + a - 1) / (b - a))`` so that ``w = 0`` maps to 1/2.

    That is only possible when 1/2 lies inside ``[a, b]``; elsewhere the
    argument is capped at ``OFFSET_CLIP`` and ``w = 0`` lands on the box
    edge nearest 1/2. Degenerate pixels get ``c = 0``.
    """
    width = b - a
    safe = np.where(width > 0, width, 1.0)
    u = np.clip((b + a - 1.0) / safe, -OFFSET_CLIP, OFFSET_CLIP)
    return np.where(width > 0, -np.arctanh(u), 0.0)


def make_frame(x, eps):
    a, b = eps_bounds(x, eps)
    return SubstitutionFrame(a, b, balance_offset(a, b))


def w_to_image(w, frame):
    half = (frame.b - frame.a) / 2
    mid = (frame.b + frame.a) / 2
    img = half * np.tanh(np.asarray(w, dtype=DTYPE) + frame.c) + mid
    # rounding can overshoot an edge by one ulp
    return np.clip(img, frame.a, frame.b)


def image_to_w(x, frame):
    """Inverse of :func:`w_to_image`.

    Points closer than ``EDGE_NUDGE`` to an edge are moved inward by that
    amount first. Degenerate pixels map to ``w = 0``.
    """
    x = np.asarray(x, dtype=DTYPE)
    a, b = frame.a, frame.b
    width = b - a
    degen = width <= 0
    if np.any(degen & (np.abs(x - a) > 1e-12)):
        raise DomainError("image outside a degenerate box")
    if np.any(~degen & ((x < a - 1e-12) | (x > b + 1e-12))):
        raise DomainError("image outside the substitution box")
    safe = np.where(degen, 1.0, width)
    nudge = np.minimum(EDGE_NUDGE, safe / 4)
    x = np.clip(x, a + nudge, b - nudge)
    u = (2 * x - a - b) / safe
    return np.where(degen, 0.0, np.arctanh(np.where(degen, 0.0, u)) - frame.c)


def image_jacobian(w, frame):
    """Diagonal ``d image / d w``; zero on degenerate pixels."""
    th = np.tanh(w + frame.c)
    return (frame.b - frame.a) / 2 * (1 - th * th)


def _as_targets(logits, t):
    t = np.asarray(t, dtype=np.int64)
    if logits.ndim == 1:
        return t.reshape(())
    return np.broadcast_to(t, logits.shape[:1])


def margin_and_rival(scores, t):
    """``max_{i != t} s_i - s_t`` and the rival index (lowest index on ties)."""
    scores = np.asarray(scores, dtype=DTYPE)
    if scores.shape[-1] < 2:
        raise ValueError("need at least two classes")
    t = _as_targets(scores, t)
    masked = scores.copy()
    np.put_along_axis(masked, t[..., None], -np.inf, axis=-1)
    rival = masked.argmax(axis=-1)
    best = np.take_along_axis(masked, rival[..., None], axis=-1)[..., 0]
    own = np.take_along_axis(scores, t[..., None], axis=-1)[..., 0]
    return best - own, rival


def cw_logit_loss(logits, t, kappa=0.0):
    """``max(max_{i != t} z_i - z_t, -kappa)``."""
    margin, _ = margin_and_rival(logits, t)
    out = np.maximum(margin, -kappa)
    return float(out) if out.ndim == 0 else out


def cw_logit_loss_grad(logits, t, kappa=0.0):
    """Loss values and their subgradient with respect to the logits.

    On the floor the gradient is zero; otherwise it is ``+1`` on the rival
    class and ``-1`` on the target.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    margin, rival = margin_and_rival(logits, t)
    t = _as_targets(logits, t)
    active = (margin >= -kappa).astype(DTYPE)
    grad = np.zeros_like(logits)
    np.put_along_axis(grad, rival[..., None], active[..., None], axis=-1)
    np.put_along_axis(grad, t[..., None], -active[..., None], axis=-1)
    return np.maximum(margin, -kappa), grad


def _cw_loss_fn(targets, kappa):
    def loss(logits, probs):
        return cw_logit_loss_grad(logits, targets, kappa)
    return loss


def epsilon_attack(net, x, t, cfg=None):
    """Targeted attack on one image; see :func:`epsilon_attack_batch`."""
    x = np.asarray(x, dtype=DTYPE)
    return epsilon_attack_batch(net, x[None], [t], cfg)[0]


def epsilon_attack_batch(net, images, targets, cfg=None):
    """Run independent targeted attacks on rows of ``images``.

    All rows share one vectorised loop; a row leaves the active set as soon as
    its loss reaches ``-kappa`` with the prediction verified to be its target
    (when ``abort_early``), or when the iteration cap is hit. Iteration 0 is
    the clean image. Each active row is charged an equal share of every
    iteration's wall time.
    """
    cfg = cfg or EpsAttackConfig()
    images = np.asarray(images, dtype=DTYPE)
    targets = np.asarray(targets, dtype=np.int64)
    n = len(images)
    frame = make_frame(images, cfg.epsilon)
    w = image_to_w(images, frame)
    state = AdamState.zeros_like(w, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    active = np.ones(n, bool)
    elapsed = np.zeros(n)
    results = [None] * n

    for it in range(cfg.max_iters + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        t0 = time.perf_counter()
        sub = frame.subset(idx)
        img = w_to_image(w[idx], sub)
        if cfg.check_box:
            assert np.all((img >= sub.a) & (img <= sub.b)), "iterate left the epsilon box"
        loss, grad_x, trace = value_and_input_gradient(net, img, _cw_loss_fn(targets[idx], cfg.kappa))
        pred = trace.logits.argmax(axis=1)
        hit = pred == targets[idx]
        if cfg.abort_early:
            done = (loss <= -cfg.kappa) & hit
        else:
            done = np.zeros(idx.size, bool)
        if it == cfg.max_iters:
            done[:] = True
        grad_w = grad_x * image_jacobian(w[idx], sub)
        step_rows = np.zeros(n, bool)
        step_rows[idx[~done]] = True
        full_grad = np.zeros_like(w)
        full_grad[idx] = grad_w
        if step_rows.any():
            state, w = adam_step(state, w, full_grad, mask=step_rows)
        elapsed[idx] += (time.perf_counter() - t0) / idx.size
        for k in np.flatnonzero(done):
            i = idx[k]
            active[i] = False
            results[i] = AttackResult(
                adversarial=img[k].copy(), success=bool(hit[k]), iterations_used=it,
                loss_final=float(loss[k]), wall_time=float(elapsed[i]),
                max_pert_8bit=max_perturbation_8bit(images[i], img[k]),
                l2_distortion_8bit=l2_distortion_8bit(images[i], img[k]), target=int(targets[i]))
    return results
