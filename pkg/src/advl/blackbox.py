"""Probability-only attacks: region-based search, transfer across temperatures.

The loss swaps logits for log-probabilities,

    max(max_{i != t} log(p_i + df) - log(p_t + df), -kappa),

which equals the logit margin whenever the probabilities are representable
(``df`` only keeps exact zeros from producing ``-inf``). The region attack
evaluates that loss at a Gaussian-jittered copy of the iterate each step, so
flat, saturated outputs around the clean image still yield a search
direction.
"""

import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from advl.metrics import l2_distortion_8bit, max_perturbation_8bit, success_rate
from advl.network import backward, forward, softmax_vjp
from advl.optim import AdamState, adam_step
from advl.tensor import DTYPE
from advl.whitebox import AttackResult, image_jacobian, image_to_w, make_frame, w_to_image

GRADIENT_MODES = ("analytic-output-only", "finite-difference")


class ConfigurationError(ValueError):
    pass


class QueryOracle:
    """Black-box access to a classifier: images in, probability vectors out.

    Wraps any callable mapping a batch of images to a batch of probability
    vectors. Each image submitted costs ``query_cost`` queries, accumulated in
    :attr:`query_count` under a lock.
    """

    def __init__(self, fn, input_shape, query_cost=1):
        self._fn = fn
        self.input_shape = tuple(input_shape)
        self.query_cost = query_cost
        self.query_count = 0
        self._lock = threading.Lock()

    def _charge(self, n):
        with self._lock:
            self.query_count += n * self.query_cost

    def _batch(self, images):
        images = np.asarray(images, dtype=DTYPE)
        single = images.shape == self.input_shape
        return (images[None] if single else images), single

    def __call__(self, images):
        batch, single = self._batch(images)
        self._charge(len(batch))
        probs = np.asarray(self._fn(batch), dtype=DTYPE)
        return probs[0] if single else probs


class NetworkOracle(QueryOracle):
    """Oracle backed by a local network.

    Besides plain queries it can differentiate a loss that reads only the
    output probabilities; this is the analytic-output-only gradient mode.
    """

    def __init__(self, net, query_cost=1):
        self.net = net
        super().__init__(lambda x: forward(net, x).probs, net.input_shape, query_cost)

    def probability_loss_gradient(self, images, loss_on_probs):
        """``loss_on_probs(probs) -> (values, d values / d probs)``, pulled back to the images.

        Returns ``(values, probs, grad_images)``; counts one query per image.
        """
        batch, single = self._batch(images)
        self._charge(len(batch))
        trace = forward(self.net, batch)
        values, grad_p = loss_on_probs(trace.probs)
        grad_z = softmax_vjp(trace.probs, grad_p, self.net.temperature)
        grad_x, _ = backward(self.net, trace, grad_z, need_input=True)
        if single:
            return values[0], trace.probs[0], grad_x[0]
        return values, trace.probs, grad_x


@dataclass
class RegionAttackConfig:
    sigma: float = 0.4
    delta_f: float = 1e-12
    max_iters: int = 1000
    kappa: float = 0.0
    epsilon_8bit: float = 52.0
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    gradient_mode: str = "analytic-output-only"
    fd_step: float = 1e-4
    fd_coords: int = None  # probed coordinates per iteration; None = all
    clip_noise: bool = True  # keep the noisy point a valid image
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not self.delta_f > 0:
            raise ValueError("delta_f must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not 0 < self.epsilon_8bit <= 255:
            raise ValueError("epsilon_8bit must lie in (0, 255]")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if not self.fd_step > 0:
            raise ValueError("fd_step must be positive")

    @property
    def epsilon(self):
        return self.epsilon_8bit / 255.0


def _margin_on_logprobs(probs, t, delta_f):
    logp = np.log(np.asarray(probs, dtype=DTYPE) + delta_f)
    t = np.asarray(t, dtype=np.int64)
    t = t.reshape(()) if logp.ndim == 1 else np.broadcast_to(t, logp.shape[:1])
    masked = logp.copy()
    np.put_along_axis(masked, t[..., None], -np.inf, axis=-1)
    rival = masked.argmax(axis=-1)
    best = np.take_along_axis(masked, rival[..., None], axis=-1)[..., 0]
    own = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    return best - own, rival, t


def blackbox_loss(probs, t, kappa=0.0, delta_f=1e-12):
    """Log-probability margin loss, floored at ``-kappa``."""
    margin, _, _ = _margin_on_logprobs(probs, t, delta_f)
    out = np.maximum(margin, -kappa)
    return float(out) if out.ndim == 0 else out


def blackbox_loss_grad(probs, t, kappa=0.0, delta_f=1e-12):
    """Loss values and their gradient with respect to the probabilities."""
    probs = np.asarray(probs, dtype=DTYPE)
    margin, rival, t = _margin_on_logprobs(probs, t, delta_f)
    on = (margin >= -kappa).astype(DTYPE)
    grad = np.zeros_like(probs)
    pr = np.take_along_axis(probs, rival[..., None], axis=-1)
    pt = np.take_along_axis(probs, t[..., None], axis=-1)
    np.put_along_axis(grad, rival[..., None], on[..., None] / (pr + delta_f), axis=-1)
    np.put_along_axis(grad, t[..., None], -on[..., None] / (pt + delta_f), axis=-1)
    return np.maximum(margin, -kappa), grad


def estimate_gradient_fd(oracle, image, t, kappa=0.0, delta_f=1e-12, fd_step=1e-4,
                         coords=None):
    """Symmetric finite-difference gradient of :func:`blackbox_loss` at ``image``.

    ``coords`` (flat pixel indices) restricts probing to a subset; other
    entries of the result are zero. Costs two queries per probed coordinate,
    submitted as one batch.
    """
    image = np.asarray(image, dtype=DTYPE)
    flat = image.ravel()
    coords = np.arange(flat.size) if coords is None else np.asarray(coords)
    k = coords.size
    probes = np.repeat(flat[None], 2 * k, axis=0)
    rows = np.arange(k)
    probes[rows, coords] += fd_step
    probes[k + rows, coords] -= fd_step
    probs = oracle(probes.reshape((2 * k,) + image.shape))
    losses = blackbox_loss(probs, t, kappa, delta_f)
    grad = np.zeros(flat.size)
    grad[coords] = (losses[:k] - losses[k:]) / (2 * fd_step)
    return grad.reshape(image.shape)


def region_attack(oracle, x, t, cfg=None, cell_id=0):
    """Region-based attack on a single image; see :func:`region_attack_batch`."""
    x = np.asarray(x, dtype=DTYPE)
    return region_attack_batch(oracle, x[None], [t], cfg, cell_ids=[cell_id])[0]


def region_attack_batch(oracle, images, targets, cfg=None, cell_ids=None):
    """Independent region-based attacks on rows of ``images``.

    Per iteration and per active row: one query on the clean iterate decides
    whether to stop (loss <= -kappa and prediction == target); otherwise Gaussian
    noise of std ``sigma`` is added, the loss gradient is taken at the noisy
    point (analytically through the probabilities, or by finite differences
    through the oracle), and Adam moves the substitution variable. The
    iterate itself is never noised. Row ``k`` draws its noise from a
    generator seeded by ``(cfg.seed, cell_ids[k])``, so results do not depend
    on how cells are batched.
    """
    cfg = cfg or RegionAttackConfig()
    images = np.asarray(images, dtype=DTYPE)
    targets = np.asarray(targets, dtype=np.int64)
    n = len(images)
    cell_ids = np.arange(n) if cell_ids is None else np.asarray(cell_ids)
    analytic = cfg.gradient_mode == "analytic-output-only"
    if analytic and not hasattr(oracle, "probability_loss_gradient"):
        raise ConfigurationError("analytic-output-only mode needs a NetworkOracle")
    rngs = [np.random.default_rng([cfg.seed, int(c)]) for c in cell_ids]
    frame = make_frame(images, cfg.epsilon)
    w = image_to_w(images, frame)
    state = AdamState.zeros_like(w, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    active = np.ones(n, bool)
    elapsed = np.zeros(n)
    queries = np.zeros(n, dtype=np.int64)
    results = [None] * n
    npix = int(np.prod(images.shape[1:]))

    for it in range(cfg.max_iters + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        t0 = time.perf_counter()
        sub = frame.subset(idx)
        img = w_to_image(w[idx], sub)
        probs = oracle(img)
        queries[idx] += 1
        loss = blackbox_loss(probs, targets[idx], cfg.kappa, cfg.delta_f)
        hit = probs.argmax(axis=1) == targets[idx]
        done = (loss <= -cfg.kappa) & hit
        if it == cfg.max_iters:
            done[:] = True
        go = np.flatnonzero(~done)
        if go.size:
            noise = np.stack([rngs[idx[k]].standard_normal(images.shape[1:]) for k in go])
            noisy = img[go] + cfg.sigma * noise
            if cfg.clip_noise:
                noisy = np.clip(noisy, 0.0, 1.0)
            if analytic:
                _, _, grad_img = oracle.probability_loss_gradient(
                    noisy, lambda p: blackbox_loss_grad(p, targets[idx[go]], cfg.kappa, cfg.delta_f))
                queries[idx[go]] += 1
            else:
                grad_img = np.empty_like(noisy)
                for j, k in enumerate(go):
                    coords = None
                    if cfg.fd_coords is not None and cfg.fd_coords < npix:
                        coords = rngs[idx[k]].choice(npix, size=cfg.fd_coords, replace=False)
                    grad_img[j] = estimate_gradient_fd(oracle, noisy[j], targets[idx[k]], cfg.kappa,
                                                       cfg.delta_f, cfg.fd_step, coords)
                    queries[idx[k]] += 2 * (npix if coords is None else coords.size)
            full = np.zeros_like(w)
            full[idx[go]] = grad_img * image_jacobian(w[idx[go]], frame.subset(idx[go]))
            mask = np.zeros(n, bool)
            mask[idx[go]] = True
            state, w = adam_step(state, w, full, mask=mask)
        elapsed[idx] += (time.perf_counter() - t0) / idx.size
        for k in np.flatnonzero(done):
            i = idx[k]
            active[i] = False
            results[i] = AttackResult(
                adversarial=img[k].copy(), success=bool(hit[k]), iterations_used=it,
                loss_final=float(loss[k]), wall_time=float(elapsed[i]),
                max_pert_8bit=max_perturbation_8bit(images[i], img[k]),
                l2_distortion_8bit=l2_distortion_8bit(images[i], img[k]),
                target=int(targets[i]), queries=int(queries[i]))
    return results


# --- transfer and robustness -----------------------------------------------

@dataclass
class BypassPlan:
    source_temperature: float
    target_temperatures: list
    attack: RegionAttackConfig = field(default_factory=RegionAttackConfig)

    def __post_init__(self):
        temps = [self.source_temperature, *self.target_temperatures]
        if any(not T > 0 for T in temps):
            raise ValueError("temperatures must be positive")


@dataclass
class BypassResult:
    source_temperature: float
    target_temperatures: list
    success: np.ndarray  # one rate per target temperature
    source_results: list = field(repr=False, default_factory=list)

    @property
    def direct_success(self):
        return success_rate(self.source_results)


def targeted_hits(net, adversarials, targets, batch_size=500):
    adversarials = np.asarray(adversarials, dtype=DTYPE)
    preds = np.concatenate([forward(net, adversarials[i:i + batch_size]).probs.argmax(axis=1)
                            for i in range(0, len(adversarials), batch_size)])
    return preds == np.asarray(targets)


def bypass_run(plan, models, images, targets, cell_ids=None):
    """Attack the source-temperature model, replay its outputs on every target model.

    ``models`` maps temperature to a deployed network; the source is attacked
    through a :class:`NetworkOracle`. Returns a :class:`BypassResult` whose
    ``success[j]`` is the targeted success rate on ``target_temperatures[j]``
    over all attempted cells.
    """
    missing = [T for T in [plan.source_temperature, *plan.target_temperatures] if T not in models]
    if missing:
        raise ConfigurationError(f"no model for temperature(s) {missing}")
    shapes = {models[T].input_shape for T in models}
    classes = {models[T].class_count for T in models}
    if len(shapes) != 1 or len(classes) != 1:
        raise ConfigurationError("all models must share input shape and class count")
    oracle = NetworkOracle(models[plan.source_temperature])
    res = region_attack_batch(oracle, images, targets, plan.attack, cell_ids)
    adv = np.stack([r.adversarial for r in res])
    tg = np.array([r.target for r in res])
    rates = np.array([targeted_hits(models[T], adv, tg).mean() for T in plan.target_temperatures])
    return BypassResult(plan.source_temperature, list(plan.target_temperatures), rates, res)


def bypass_matrix(sources, target_temperatures, models, images, targets, attack, cell_ids=None):
    """Stack :func:`bypass_run` rows for several source temperatures."""
    rows = []
    for s in sources:
        plan = BypassPlan(s, list(target_temperatures), replace(attack))
        rows.append(bypass_run(plan, models, images, targets, cell_ids))
    return np.stack([r.success for r in rows]), rows


def noise_robustness(adversarials, oracle, targets, sigma_test, trials=20, seed=0):
    """Fraction of (image, trial) pairs still classified as the target after
    adding fresh Gaussian noise of std ``sigma_test`` and clamping to [0, 1]."""
    if sigma_test < 0:
        raise ValueError("sigma_test must be non-negative")
    adv = np.asarray(adversarials, dtype=DTYPE)
    targets = np.asarray(targets)
    if sigma_test == 0:
        return float((oracle(adv).argmax(axis=1) == targets).mean())
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(trials):
        noisy = np.clip(adv + sigma_test * rng.standard_normal(adv.shape), 0.0, 1.0)
        hits += int((oracle(noisy).argmax(axis=1) == targets).sum())
    return hits / (trials * len(adv))
