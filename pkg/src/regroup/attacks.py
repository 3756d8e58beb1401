"""Seeded adversarial-example generators: FGSM, PGD, high-confidence PGD,
and gradient-free SPSA.

All attacks work on the [0,1] pixel scale, keep iterates inside the L-inf
epsilon ball around the source (except the unbounded high-confidence
variant) and inside [0,1]. Each sample gets its own PRNG stream derived from
(seed, sample index), so generation order and parallelism cannot change any
output bit.

Success is always decided on the f32-quantized candidate, i.e. exactly the
image a reloaded adversarial-set file will contain, so accuracies computed
from saved sets match the success flags by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import engine
from .errors import ValidationError

METHODS = ("fgsm", "pgd", "pgd_hc", "spsa")


@dataclass
class AttackConfig:
    method: str = "pgd"
    eps: float = 4 / 255  # L-inf budget on the [0,1] scale
    step_size: float = 0.01
    max_iter: int = 40
    random_start: bool = True
    targeted: bool = False
    min_confidence: float = 0.9  # pgd_hc success criterion
    spsa_perturbation: float = 0.01
    spsa_batch: int = 64
    spsa_learning_rate: float = 0.01
    seed: int = 0

    def validate(self):
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.eps < 0:
            raise ValidationError(f"eps must be >= 0, got {self.eps}")
        if self.max_iter < 1:
            raise ValidationError(f"max_iter must be >= 1, got {self.max_iter}")
        if not 0 < self.min_confidence < 1:
            raise ValidationError(f"min_confidence must be in (0,1), got {self.min_confidence}")
        if self.step_size <= 0:
            raise ValidationError(f"step_size must be > 0, got {self.step_size}")
        if self.spsa_perturbation <= 0 or self.spsa_batch < 1 or self.spsa_learning_rate <= 0:
            raise ValidationError("bad SPSA parameters")


@dataclass
class AdversarialRecord:
    source_index: int
    true_label: int
    target: Optional[int]  # None for untargeted
    image: np.ndarray  # (C,H,W) float64 in [0,1]
    success: bool
    confidence: float  # softmax probability of the predicted class


def rng_for_sample(seed: int, index: int) -> np.random.Generator:
    """Independent, reproducible PRNG stream for one (seed, sample) pair."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def draw_target(rng: np.random.Generator, num_classes: int, true_label: int) -> int:
    """Uniform over the classes other than the true one."""
    if num_classes < 2:
        raise ValidationError("targeted attacks need at least 2 classes")
    t = int(rng.integers(num_classes - 1))
    return t + (t >= true_label)


def _project(cand: np.ndarray, x0: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(x0 + np.clip(cand - x0, -eps, eps), 0.0, 1.0)


def _quantized(cand: np.ndarray) -> np.ndarray:
    # what the f32 adversarial-set file will round-trip to
    return cand.astype(np.float32).astype(np.float64)


def _evaluate(model, image, true_label, target, min_confidence=None):
    """(success, confidence) of a candidate under the attack's goal."""
    probs = engine.softmax(engine.forward_logits(model, image[None])[0])
    pred = int(probs.argmax())
    conf = float(probs[pred])
    if target is None:
        ok = pred != true_label
    else:
        ok = pred == target
    if min_confidence is not None:
        ok = ok and conf >= min_confidence
    return ok, conf


def pgd(model: engine.NetworkModel, x: np.ndarray, y: int, config: AttackConfig,
        index: int = 0, target: Optional[int] = None) -> AdversarialRecord:
    """Projected gradient descent with optional random start and early return
    on the first successful iterate."""
    config.validate()
    x0 = np.asarray(x, dtype=np.float64)
    rng = rng_for_sample(config.seed, index)
    if config.targeted and target is None:
        target = draw_target(rng, model.num_classes, y)
    cand = x0.copy()
    if config.random_start and config.eps > 0:
        cand = _project(x0 + rng.uniform(-config.eps, config.eps, size=x0.shape), x0, config.eps)
    ok, conf = _evaluate(model, _quantized(cand), y, target)
    if ok:
        return AdversarialRecord(index, y, target, cand, True, conf)
    if config.eps == 0:  # projection pins every iterate to x
        return AdversarialRecord(index, y, target, cand, False, conf)
    loss_label = y if target is None else target
    sign = 1.0 if target is None else -1.0  # ascend the true-label loss / descend toward target
    for _ in range(config.max_iter):
        grad = engine.input_gradient(model, cand, loss_label)
        cand = _project(cand + sign * config.step_size * np.sign(grad), x0, config.eps)
        ok, conf = _evaluate(model, _quantized(cand), y, target)
        if ok:
            return AdversarialRecord(index, y, target, cand, True, conf)
    return AdversarialRecord(index, y, target, cand, False, conf)


def fgsm(model: engine.NetworkModel, x: np.ndarray, y: int, eps: float,
         index: int = 0) -> AdversarialRecord:
    """Single ascent step of size eps (PGD with one iteration, no random start)."""
    if eps < 0:
        raise ValidationError(f"eps must be >= 0, got {eps}")
    x0 = np.asarray(x, dtype=np.float64)
    grad = engine.input_gradient(model, x0, y)
    cand = _project(x0 + eps * np.sign(grad), x0, eps)
    ok, conf = _evaluate(model, _quantized(cand), y, None)
    return AdversarialRecord(index, y, None, cand, ok, conf)


def pgd_high_confidence(model: engine.NetworkModel, x: np.ndarray, y: int,
                        config: AttackConfig, index: int = 0,
                        target: Optional[int] = None) -> AdversarialRecord:
    """PGD without the epsilon projection; success additionally requires the
    predicted-class confidence to reach config.min_confidence.

    Each step descends the cross-entropy of the goal class (the target, or
    the currently most likely wrong class), which drives its confidence up.
    An outer search doubles the step size after every failed trial, bounded
    by a total budget of config.max_iter gradient steps.
    """
    config.validate()
    x0 = np.asarray(x, dtype=np.float64)
    rng = rng_for_sample(config.seed, index)
    if config.targeted and target is None:
        target = draw_target(rng, model.num_classes, y)
    ok, conf = _evaluate(model, _quantized(x0), y, target, config.min_confidence)
    if ok:
        return AdversarialRecord(index, y, target, x0.copy(), True, conf)
    budget = config.max_iter
    inner_cap = min(40, budget)
    alpha = config.step_size
    cand = x0.copy()
    while budget > 0:
        cand = x0.copy()
        if config.random_start:
            cand = np.clip(x0 + rng.uniform(-alpha, alpha, size=x0.shape), 0.0, 1.0)
        steps = min(inner_cap, budget)
        budget -= steps
        for _ in range(steps):
            if target is not None:
                goal = target
            else:
                probs = engine.softmax(engine.forward_logits(model, cand[None])[0])
                probs[y] = -1.0
                goal = int(probs.argmax())
            grad = engine.input_gradient(model, cand, goal)
            cand = np.clip(cand - alpha * np.sign(grad), 0.0, 1.0)
            ok, conf = _evaluate(model, _quantized(cand), y, target, config.min_confidence)
            if ok:
                return AdversarialRecord(index, y, target, cand, True, conf)
        alpha *= 2.0
    return AdversarialRecord(index, y, target, cand, False, conf)


def spsa_gradient_estimate(loss_fn, x: np.ndarray, perturbation: float, batch: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Two-sided stochastic gradient estimate from Rademacher probes.

    loss_fn maps a batch of inputs (N, *x.shape) to per-sample losses (N,).
    """
    v = rng.integers(0, 2, size=(batch,) + x.shape).astype(np.float64) * 2.0 - 1.0
    lp = loss_fn(x[None] + perturbation * v)
    lm = loss_fn(x[None] - perturbation * v)
    coeff = (lp - lm) / (2.0 * perturbation)
    return (coeff.reshape((batch,) + (1,) * x.ndim) * v).mean(axis=0)


def spsa(model: engine.NetworkModel, x: np.ndarray, y: int, config: AttackConfig,
         index: int = 0, target: Optional[int] = None) -> AdversarialRecord:
    """Gradient-free attack: SPSA gradient estimates plus Adam-style updates,
    projected to the epsilon ball and [0,1] each iteration. Uses forward
    passes only."""
    config.validate()
    x0 = np.asarray(x, dtype=np.float64)
    rng = rng_for_sample(config.seed, index)
    if config.targeted and target is None:
        target = draw_target(rng, model.num_classes, y)
    ok, conf = _evaluate(model, _quantized(x0), y, target)
    if ok:
        return AdversarialRecord(index, y, target, x0.copy(), True, conf)
    if config.eps == 0:
        return AdversarialRecord(index, y, target, x0.copy(), False, conf)
    loss_label = y if target is None else target
    sign = 1.0 if target is None else -1.0

    def ascent_loss(batch_x):
        logits = engine.forward_logits(model, batch_x)
        labels = np.full(len(batch_x), loss_label)
        return sign * engine.cross_entropy(logits, labels)

    cand = x0.copy()
    m = np.zeros_like(x0)
    v = np.zeros_like(x0)
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    for t in range(1, config.max_iter + 1):
        g = spsa_gradient_estimate(ascent_loss, cand, config.spsa_perturbation,
                                   config.spsa_batch, rng)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        cand = _project(cand + config.spsa_learning_rate * mhat / (np.sqrt(vhat) + adam_eps),
                        x0, config.eps)
        ok, conf = _evaluate(model, _quantized(cand), y, target)
        if ok:
            return AdversarialRecord(index, y, target, cand, True, conf)
    return AdversarialRecord(index, y, target, cand, False, conf)


def run_attack(model: engine.NetworkModel, x: np.ndarray, y: int, config: AttackConfig,
               index: int = 0) -> AdversarialRecord:
    """Dispatch on config.method."""
    if config.method == "pgd":
        return pgd(model, x, y, config, index)
    if config.method == "fgsm":
        return fgsm(model, x, y, config.eps, index)
    if config.method == "pgd_hc":
        return pgd_high_confidence(model, x, y, config, index)
    if config.method == "spsa":
        return spsa(model, x, y, config, index)
    raise ValidationError(f"unknown attack method {config.method!r}")


def filter_successful(records: list) -> list:
    """The subset of records the attacker actually succeeded on (#S)."""
    return [r for r in records if r.success]
