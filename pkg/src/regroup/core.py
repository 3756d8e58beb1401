"""Layer-wise generative classifiers and rank aggregation.

Pipeline: pre-activation responses of each parametric layer are folded into
positive/negative probability mass functions (one entry per feature map /
neuron), class-conditional mixtures of those PMFs act as per-layer generative
classifiers scored by KL divergence, and the resulting per-layer class
rankings are aggregated with Borda counts over the deepest k layers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import engine
from .errors import ValidationError

MODES = ("pos", "neg", "both")


# ---------------------------------------------------------------------------
# layer signatures


@dataclass
class LayerSignature:
    """Positive/negative response PMFs for one layer of one sample."""

    layer_ordinal: int  # 0-based position in the votable-layer list
    pos: np.ndarray  # (d,) strictly positive, sums to 1
    neg: np.ndarray  # (d,)


def layer_signature(preact: np.ndarray, delta: float, layer_ordinal: int = 0) -> LayerSignature:
    """Fold one pre-activation tensor into its positive/negative PMF pair.

    Conv maps (C,H,W) accumulate |positive part| and |negative part| over the
    spatial extent of each feature map; vectors use the identity sum. `delta`
    is added to every accumulator before normalizing, so both PMFs are
    strictly positive even for one-sided responses.
    """
    if delta <= 0:
        raise ValidationError(f"delta must be > 0, got {delta}")
    phi = np.asarray(preact, dtype=np.float64)
    if phi.ndim == 3:
        pos = np.maximum(phi, 0.0).sum(axis=(1, 2))
        neg = np.maximum(-phi, 0.0).sum(axis=(1, 2))
    elif phi.ndim == 1:
        pos = np.maximum(phi, 0.0)
        neg = np.maximum(-phi, 0.0)
    else:
        raise ValidationError(f"pre-activation must be (C,H,W) or (d,), got shape {phi.shape}")
    pos = pos + delta
    neg = neg + delta
    return LayerSignature(layer_ordinal, pos / pos.sum(), neg / neg.sum())


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class GenerativeEnsemble:
    """Per layer and class, the mixture PMFs of positive/negative responses.

    pos[ordinal] / neg[ordinal] are (M, d) matrices whose row y is the mixture
    PMF for class y at that votable layer. Build-time metadata (class counts,
    mixture weights, sample fingerprints) is kept in memory but not persisted.
    """

    num_classes: int
    delta: float
    layer_indices: list  # model-layer positions of the votable layers
    pos: list  # n matrices (M, d_l)
    neg: list
    selected_k: Optional[int] = None
    class_counts: Optional[np.ndarray] = None
    mixture_weights: Optional[dict] = None  # class -> (count,) lambda vector
    warnings: list = field(default_factory=list)
    build_fingerprints: Optional[set] = None

    @property
    def n_layers(self) -> int:
        return len(self.layer_indices)

    def layer_dims(self) -> list:
        return [m.shape[1] for m in self.pos]

    def validate(self, tol: float = 1e-9):
        if len(self.pos) != len(self.layer_indices) or len(self.neg) != len(self.layer_indices):
            raise ValidationError("ensemble matrices missing for some votable layer")
        for ordinal, (cp, cn) in enumerate(zip(self.pos, self.neg)):
            for name, mat in (("positive", cp), ("negative", cn)):
                if mat.shape[0] != self.num_classes:
                    raise ValidationError(
                        f"{name} matrix at votable layer {ordinal} has {mat.shape[0]} rows, "
                        f"expected {self.num_classes}")
                if not (mat > 0).all():
                    raise ValidationError(
                        f"{name} matrix at votable layer {ordinal} has non-positive entries")
                sums = mat.sum(axis=1)
                if np.abs(sums - 1.0).max() > tol:
                    raise ValidationError(
                        f"{name} matrix at votable layer {ordinal} has rows not summing to 1")


def _fingerprint(image: np.ndarray) -> bytes:
    return hashlib.sha1(np.ascontiguousarray(image, dtype=np.float64).tobytes()).digest()


def build_ensemble(model: engine.NetworkModel, images: np.ndarray, labels: np.ndarray,
                   quota: int, delta: float) -> GenerativeEnsemble:
    """Build per-layer, per-class mixture classifiers from training data.

    Scans the dataset in stored order and keeps, per class, the first `quota`
    samples whose softmax argmax equals the true label. Mixture weights are
    proportional to the softmax probability of the true class, normalized
    within each class subset; accumulation runs in ascending sample-index
    order so builds are bit-reproducible.
    """
    if quota < 1:
        raise ValidationError(f"quota must be >= 1, got {quota}")
    if delta <= 0:
        raise ValidationError(f"delta must be > 0, got {delta}")
    m = model.num_classes
    labels = np.asarray(labels)
    if len(images) != len(labels):
        raise ValidationError("images/labels length mismatch")
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ValidationError(f"labels outside [0, {m})")

    # selection pass: softmax over the whole set, first-come per class
    probs = engine.softmax(_batched_logits(model, images))
    predicted = probs.argmax(axis=1)
    chosen = [[] for _ in range(m)]  # per class: list of (index, true-class prob)
    remaining = m * quota
    for j in range(len(images)):
        y = int(labels[j])
        if predicted[j] == y and len(chosen[y]) < quota:
            chosen[y].append((j, probs[j, y]))
            remaining -= 1
            if remaining == 0:
                break

    deficient = [y for y in range(m) if not chosen[y]]
    if deficient:
        raise ValidationError(
            f"no correctly classified samples for classes {deficient}; cannot build ensemble")

    dims = _votable_dims(model)
    pos = [np.zeros((m, d)) for d in dims]
    neg = [np.zeros((m, d)) for d in dims]
    weights = {}
    warnings = []
    fingerprints = set()
    counts = np.array([len(chosen[y]) for y in range(m)])
    for y in range(m):
        if counts[y] < quota:
            warnings.append(f"class {y}: only {counts[y]} correctly classified samples "
                            f"(quota {quota})")
        lam = np.array([p for _, p in chosen[y]])
        lam = lam / lam.sum()
        weights[y] = lam
        for lam_j, (j, _) in zip(lam, chosen[y]):
            trace = engine.forward_with_trace(model, images[j])
            fingerprints.add(_fingerprint(images[j]))
            for ordinal, pre in enumerate(trace.preacts):
                sig = layer_signature(pre, delta, ordinal)
                pos[ordinal][y] += lam_j * sig.pos
                neg[ordinal][y] += lam_j * sig.neg

    ens = GenerativeEnsemble(
        num_classes=m, delta=delta, layer_indices=list(model.votable_layers),
        pos=pos, neg=neg, class_counts=counts, mixture_weights=weights,
        warnings=warnings, build_fingerprints=fingerprints)
    ens.validate()
    return ens


def _batched_logits(model, images, batch_size=256):
    parts = [engine.forward_logits(model, images[s:s + batch_size])
             for s in range(0, len(images), batch_size)]
    return np.concatenate(parts, axis=0)


def _votable_dims(model) -> list:
    dims = []
    for pos in model.votable_layers:
        layer = model.layers[pos]
        dims.append(layer.out_channels if layer.kind == "conv2d" else layer.out_dim)
    return dims


# ---------------------------------------------------------------------------
# KL scoring and ranking


def kl_divergence(model_pmf: np.ndarray, test_pmf: np.ndarray) -> float:
    """KL(classifier || test) = sum_i c_i ln(c_i / p_i), natural log."""
    c = np.asarray(model_pmf, dtype=np.float64)
    p = np.asarray(test_pmf, dtype=np.float64)
    if c.shape != p.shape:
        raise ValidationError(f"PMF length mismatch: {c.shape} vs {p.shape}")
    if (c <= 0).any() or (p <= 0).any():
        raise ValidationError("PMFs must be strictly positive")
    return float(np.sum(c * np.log(c / p)))


@dataclass
class RankPreference:
    """1-based class ranks from one voter (one sign of one layer)."""

    layer_ordinal: int
    sign: str  # "positive" | "negative"
    ranks: np.ndarray  # (M,) permutation of 1..M


def _ranks_from_scores(scores: np.ndarray) -> np.ndarray:
    """Ascending-score ranks, ties broken by ascending class index."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.int64)
    ranks[order] = np.arange(1, len(scores) + 1)
    return ranks


def rank_layer(ensemble: GenerativeEnsemble, layer_ordinal: int,
               signature: LayerSignature) -> tuple[RankPreference, RankPreference]:
    """Score one test signature against every class mixture of one layer and
    return the two voters' rank vectors (positive and negative sign)."""
    if not 0 <= layer_ordinal < ensemble.n_layers:
        raise ValidationError(f"layer ordinal {layer_ordinal} out of range")
    cp = ensemble.pos[layer_ordinal]
    cn = ensemble.neg[layer_ordinal]
    if signature.pos.shape != (cp.shape[1],):
        raise ValidationError(
            f"signature dim {signature.pos.shape[0]} != ensemble layer dim {cp.shape[1]}")
    pos_scores = np.sum(cp * np.log(cp / signature.pos[None, :]), axis=1)
    neg_scores = np.sum(cn * np.log(cn / signature.neg[None, :]), axis=1)
    return (RankPreference(layer_ordinal, "positive", _ranks_from_scores(pos_scores)),
            RankPreference(layer_ordinal, "negative", _ranks_from_scores(neg_scores)))


def borda_layer(rank_pos: Optional[RankPreference], rank_neg: Optional[RankPreference],
                num_classes: int, mode: str = "both") -> np.ndarray:
    """Borda score of every class for one layer: each voter awards
    (M - rank); `both` sums the two voters, single-sign modes use one."""
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    scores = np.zeros(num_classes, dtype=np.int64)
    if mode in ("pos", "both"):
        scores += num_classes - rank_pos.ranks
    if mode in ("neg", "both"):
        scores += num_classes - rank_neg.ranks
    return scores


@dataclass
class BordaTally:
    """Aggregated Borda scores over the deepest k votable layers."""

    scores: np.ndarray  # (M,) int64
    k: int
    mode: str
    prediction: int  # argmax, smallest class index on ties
    class_order: np.ndarray  # classes best-first (score desc, index asc)


def _tally_from_scores(scores: np.ndarray, k: int, mode: str) -> BordaTally:
    order = np.lexsort((np.arange(len(scores)), -scores))
    return BordaTally(scores=scores, k=k, mode=mode,
                      prediction=int(scores.argmax()), class_order=order)


def regroup_predict(ensemble: GenerativeEnsemble, trace: engine.FeatureTrace,
                    k: int, mode: str = "both") -> BordaTally:
    """Aggregate the Borda counts of the deepest k votable layers' voters."""
    n = ensemble.n_layers
    if not 1 <= k <= n:
        raise ValidationError(f"k must be in [1, {n}], got {k}")
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    if len(trace.preacts) != n:
        raise ValidationError(
            f"trace has {len(trace.preacts)} votable layers, ensemble has {n}")
    total = np.zeros(ensemble.num_classes, dtype=np.int64)
    for ordinal in range(n - k, n):
        sig = layer_signature(trace.preacts[ordinal], ensemble.delta, ordinal)
        rp, rn = rank_layer(ensemble, ordinal, sig)
        total += borda_layer(rp, rn, ensemble.num_classes, mode)
    return _tally_from_scores(total, k, mode)


# ---------------------------------------------------------------------------
# calibration


@dataclass
class PerLayerAccuracy:
    """Per-votable-layer Borda-vote accuracy over a calibration set."""

    accuracies: np.ndarray  # (n,)
    used: int
    skipped: int  # calibration samples not correctly classified by softmax
    in_sample: Optional[int]  # overlap with the build set, None if unknown


def per_layer_accuracy(ensemble: GenerativeEnsemble, model: engine.NetworkModel,
                       images: np.ndarray, labels: np.ndarray) -> PerLayerAccuracy:
    """Accuracy of each single layer's two-voter Borda vote.

    Calibration samples should be correctly classified by the softmax; any
    that are not are skipped and counted. Overlap with the build set is
    reported when the ensemble still carries its build fingerprints.
    """
    if len(images) == 0:
        raise ValidationError("empty calibration set")
    n = ensemble.n_layers
    hits = np.zeros(n, dtype=np.int64)
    used = 0
    skipped = 0
    overlap = 0 if ensemble.build_fingerprints is not None else None
    for j in range(len(images)):
        trace = engine.forward_with_trace(model, images[j])
        y = int(labels[j])
        if int(trace.softmax.argmax()) != y:
            skipped += 1
            continue
        used += 1
        if overlap is not None and _fingerprint(images[j]) in ensemble.build_fingerprints:
            overlap += 1
        for ordinal in range(n):
            sig = layer_signature(trace.preacts[ordinal], ensemble.delta, ordinal)
            rp, rn = rank_layer(ensemble, ordinal, sig)
            scores = borda_layer(rp, rn, ensemble.num_classes, "both")
            if int(scores.argmax()) == y:
                hits[ordinal] += 1
    if used == 0:
        raise ValidationError("no correctly classified calibration samples")
    return PerLayerAccuracy(hits / used, used, skipped, overlap)


def select_k(accuracies: np.ndarray, threshold: float = 0.75) -> int:
    """Length of the maximal contiguous suffix with accuracy >= threshold;
    at least 1 (the final layer always votes)."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size == 0:
        raise ValidationError("empty accuracy vector")
    k = 0
    for a in acc[::-1]:
        if a >= threshold:
            k += 1
        else:
            break
    return max(k, 1)
