import numpy as np
import pytest

from regroup import core, engine
from regroup.core import (GenerativeEnsemble, LayerSignature, borda_layer,
                          build_ensemble, kl_divergence, layer_signature,
                          per_layer_accuracy, rank_layer, regroup_predict, select_k)
from regroup.errors import ValidationError

from _oracles import kl_naive, ranks_naive, regroup_naive, signature_naive
from conftest import linear_model, tiny_cnn

# frozen with a 50-digit arbitrary-precision evaluation of
# 0.5*ln(0.5/0.25) + 0.5*ln(0.5/0.75)
KL_HALF_QUARTER = 0.14384103622589046


# ---------------------------------------------------------------------------
# layer signatures


def test_signature_all_zero_is_uniform():
    for delta in (1e-9, 1e-6, 0.5):
        sig = layer_signature(np.zeros(4), delta)
        assert np.array_equal(sig.pos, [0.25, 0.25, 0.25, 0.25])
        assert np.array_equal(sig.neg, [0.25, 0.25, 0.25, 0.25])


def test_signature_hand_example_two_feature_maps():
    # maps [[1,-2],[3,0]] and [[-1,5],[0,-3]]: P=[4,5], N=[2,4]
    phi = np.array([[[1.0, -2.0], [3.0, 0.0]],
                    [[-1.0, 5.0], [0.0, -3.0]]])
    sig = layer_signature(phi, 1e-12)
    assert np.abs(sig.pos - [4 / 9, 5 / 9]).max() <= 1e-9
    assert np.abs(sig.neg - [1 / 3, 2 / 3]).max() <= 1e-9
    # exact agreement with the scalar-loop oracle at the same delta
    opos, oneg = signature_naive(phi.tolist(), 1e-12)
    assert np.abs(sig.pos - opos).max() <= 1e-15
    assert np.abs(sig.neg - oneg).max() <= 1e-15


def test_signature_positive_preacts_give_uniform_negative():
    rng = np.random.default_rng(0)
    phi = rng.uniform(0.5, 2.0, (3, 4, 4))
    sig = layer_signature(phi, 1e-6)
    # every negative accumulator equals delta exactly, so all entries agree
    assert len(set(sig.neg.tolist())) == 1


def test_signature_vector_input_identity_sum():
    sig = layer_signature(np.array([1.0, -2.0, 0.0]), 1e-9)
    assert np.abs(sig.pos - [1.0, 0.0, 0.0]).max() <= 1e-8
    assert np.abs(sig.neg - [0.0, 1.0, 0.0]).max() <= 1e-8


def test_signature_rejects_bad_delta():
    with pytest.raises(ValidationError):
        layer_signature(np.zeros(3), 0.0)
    with pytest.raises(ValidationError):
        layer_signature(np.zeros(3), -1e-6)


def test_signature_pmf_invariants_randomized():
    rng = np.random.default_rng(1)
    for _ in range(200):
        if rng.integers(2):
            phi = rng.normal(0, 3, (int(rng.integers(1, 5)),
                                    int(rng.integers(1, 4)), int(rng.integers(1, 4))))
        else:
            phi = rng.normal(0, 3, int(rng.integers(1, 8)))
        sig = layer_signature(phi, 10.0 ** rng.integers(-9, 0))
        for vec in (sig.pos, sig.neg):
            assert (vec > 0).all()
            assert abs(vec.sum() - 1.0) <= 1e-9


# ---------------------------------------------------------------------------
# KL divergence


def test_kl_identical_is_exactly_zero():
    p = np.array([0.2, 0.3, 0.5])
    assert kl_divergence(p, p) == 0.0


def test_kl_hand_value():
    got = kl_divergence(np.array([0.5, 0.5]), np.array([0.25, 0.75]))
    assert abs(got - KL_HALF_QUARTER) <= 1e-15
    assert abs(got - kl_naive([0.5, 0.5], [0.25, 0.75])) <= 1e-15


def test_kl_nonnegative_randomized():
    rng = np.random.default_rng(2)
    for _ in range(500):
        d = int(rng.integers(2, 12))
        c = rng.random(d) + 1e-3
        p = rng.random(d) + 1e-3
        c /= c.sum()
        p /= p.sum()
        assert kl_divergence(c, p) >= -1e-15


def test_kl_errors():
    with pytest.raises(ValidationError):
        kl_divergence(np.array([0.5, 0.5]), np.array([1.0]))
    with pytest.raises(ValidationError):
        kl_divergence(np.array([0.5, 0.5]), np.array([1.0, 0.0]))


# ---------------------------------------------------------------------------
# ensembles


def _diverse_model_and_data(seed, n=60, classes=3):
    """A tiny model plus random inputs relabeled to its own predictions, with
    the seed advanced until every class actually occurs."""
    for s in range(seed, seed + 50):
        model = tiny_cnn(seed=s, num_classes=classes)
        rng = np.random.default_rng(s)
        images = rng.random((n, 1, 8, 8))
        labels = engine.forward_logits(model, images).argmax(axis=1)
        if len(set(labels.tolist())) == classes:
            return model, images, labels
    raise AssertionError("no seed produced class-diverse predictions")


def _random_ensemble(rng, m, dims, delta=1e-6):
    pos = []
    neg = []
    for d in dims:
        a = rng.random((m, d)) + 0.05
        b = rng.random((m, d)) + 0.05
        pos.append(a / a.sum(axis=1, keepdims=True))
        neg.append(b / b.sum(axis=1, keepdims=True))
    return GenerativeEnsemble(num_classes=m, delta=delta,
                              layer_indices=list(range(len(dims))), pos=pos, neg=neg)


def test_build_single_sample_per_class_copies_signature():
    model, images, labels = _diverse_model_and_data(3, n=40)
    ens = build_ensemble(model, images, labels, quota=1, delta=1e-6)
    # each class row must equal the first matching sample's signature exactly
    first = {}
    for j, y in enumerate(labels.tolist()):
        first.setdefault(y, j)
    for y, j in first.items():
        trace = engine.forward_with_trace(model, images[j])
        for ordinal, pre in enumerate(trace.preacts):
            sig = layer_signature(pre, 1e-6, ordinal)
            assert np.array_equal(ens.pos[ordinal][y], sig.pos)
            assert np.array_equal(ens.neg[ordinal][y], sig.neg)


def test_build_mixture_weights_follow_true_class_probability():
    model, images, labels = _diverse_model_and_data(4)
    probs = engine.softmax(engine.forward_logits(model, images))
    ens = build_ensemble(model, images, labels, quota=2, delta=1e-6)
    for y in range(3):
        picked = [j for j in range(len(images)) if labels[j] == y][:2]
        lam = np.array([probs[j, y] for j in picked])
        lam = lam / lam.sum()
        assert np.abs(ens.mixture_weights[y] - lam).max() <= 1e-12
        # direct evaluation of the mixture on one layer
        sigs = [layer_signature(engine.forward_with_trace(model, images[j]).preacts[0], 1e-6)
                for j in picked]
        want = sum(l * s.pos for l, s in zip(lam, sigs))
        assert np.abs(ens.pos[0][y] - want).max() <= 1e-12


def test_build_rows_are_pmfs():
    model = tiny_cnn(seed=5)
    rng = np.random.default_rng(5)
    images = rng.random((80, 1, 8, 8))
    labels = engine.forward_logits(model, images).argmax(axis=1)
    ens = build_ensemble(model, images, labels, quota=5, delta=1e-6)
    for mats in (ens.pos, ens.neg):
        for mat in mats:
            assert (mat > 0).all()
            assert np.abs(mat.sum(axis=1) - 1.0).max() <= 1e-9


def test_build_fails_listing_deficient_classes():
    model = tiny_cnn(seed=6)
    rng = np.random.default_rng(6)
    images = rng.random((20, 1, 8, 8))
    preds = engine.forward_logits(model, images).argmax(axis=1)
    labels = (preds + 1) % 3  # every sample misclassified
    with pytest.raises(ValidationError, match=r"classes \[0, 1, 2\]"):
        build_ensemble(model, images, labels, quota=1, delta=1e-6)


def test_build_underfilled_class_warns_but_builds():
    model, images, labels = _diverse_model_and_data(7)
    ens = build_ensemble(model, images, labels, quota=1000, delta=1e-6)
    assert ens.warnings
    assert int(ens.class_counts.sum()) == len(images)


def test_build_rejects_bad_quota_and_labels():
    model = tiny_cnn(seed=8)
    images = np.zeros((4, 1, 8, 8))
    with pytest.raises(ValidationError):
        build_ensemble(model, images, np.zeros(4, dtype=int), quota=0, delta=1e-6)
    with pytest.raises(ValidationError):
        build_ensemble(model, images, np.array([0, 1, 2, 3]), quota=1, delta=1e-6)


# ---------------------------------------------------------------------------
# ranking


def test_ranks_sort_example():
    assert np.array_equal(core._ranks_from_scores(np.array([0.3, 0.1, 0.2])), [3, 1, 2])
    assert ranks_naive([0.3, 0.1, 0.2]) == [3, 1, 2]


def test_ranks_single_class():
    rng = np.random.default_rng(9)
    ens = _random_ensemble(rng, 1, [3])
    sig = layer_signature(rng.normal(0, 1, 3), 1e-6)
    rp, rn = rank_layer(ens, 0, sig)
    assert rp.ranks.tolist() == [1]
    assert rn.ranks.tolist() == [1]


def test_rank_identity_signature_wins():
    rng = np.random.default_rng(10)
    ens = _random_ensemble(rng, 5, [4])
    y = 3
    sig = LayerSignature(0, ens.pos[0][y].copy(), ens.neg[0][y].copy())
    rp, rn = rank_layer(ens, 0, sig)
    assert rp.ranks[y] == 1
    assert rn.ranks[y] == 1


def test_rank_vectors_are_permutations_randomized():
    rng = np.random.default_rng(11)
    for _ in range(300):
        m = int(rng.integers(1, 8))
        d = int(rng.integers(1, 6))
        ens = _random_ensemble(rng, m, [d])
        sig = layer_signature(rng.normal(0, 2, d), 1e-6)
        rp, rn = rank_layer(ens, 0, sig)
        assert sorted(rp.ranks.tolist()) == list(range(1, m + 1))
        assert sorted(rn.ranks.tolist()) == list(range(1, m + 1))


def test_rank_argsort_invariance_under_monotone_transform():
    rng = np.random.default_rng(12)
    for _ in range(100):
        scores = rng.normal(0, 1, 6)
        transformed = np.exp(2.0 * scores) + 1.0
        assert np.array_equal(core._ranks_from_scores(scores),
                              core._ranks_from_scores(transformed))


def test_rank_dimension_mismatch():
    rng = np.random.default_rng(13)
    ens = _random_ensemble(rng, 3, [4])
    sig = layer_signature(rng.normal(0, 1, 5), 1e-6)
    with pytest.raises(ValidationError):
        rank_layer(ens, 0, sig)


# ---------------------------------------------------------------------------
# Borda counts


def _pref(ranks, sign="positive"):
    return core.RankPreference(0, sign, np.array(ranks, dtype=np.int64))


def test_borda_hand_example():
    got = borda_layer(_pref([1, 3, 2]), _pref([2, 1, 3], "negative"), 3)
    assert got.tolist() == [3, 2, 1]


def test_borda_two_class_majority():
    # agreeing voters pick the winner; a single voter is exactly majority vote
    both = borda_layer(_pref([1, 2]), _pref([1, 2], "negative"), 2)
    assert both.argmax() == 0
    single = borda_layer(_pref([2, 1]), None, 2, mode="pos")
    assert single.argmax() == 1


def test_borda_single_sign_sum_is_permutation_sum():
    rng = np.random.default_rng(14)
    for _ in range(200):
        m = int(rng.integers(1, 10))
        ranks = rng.permutation(m) + 1
        scores = borda_layer(_pref(ranks), None, m, mode="pos")
        assert scores.sum() == m * (m - 1) // 2


def test_borda_mode_validation():
    with pytest.raises(ValidationError):
        borda_layer(_pref([1]), _pref([1], "negative"), 1, mode="all")


# ---------------------------------------------------------------------------
# aggregated prediction


def _random_trace(rng, model_dims):
    preacts = []
    for d in model_dims:
        if rng.integers(2):
            preacts.append(rng.normal(0, 2, (d, int(rng.integers(1, 4)), int(rng.integers(1, 4)))))
        else:
            preacts.append(rng.normal(0, 2, d))
    logits = rng.normal(0, 1, 4)
    return engine.FeatureTrace(preacts, logits, engine.softmax(logits))


def test_predict_k1_uses_final_layer_only():
    rng = np.random.default_rng(15)
    ens = _random_ensemble(rng, 4, [3, 5, 2])
    trace = _random_trace(rng, [3, 5, 2])
    tally = regroup_predict(ens, trace, k=1, mode="both")
    sig = layer_signature(trace.preacts[-1], ens.delta, 2)
    rp, rn = rank_layer(ens, 2, sig)
    assert np.array_equal(tally.scores, borda_layer(rp, rn, 4))


def test_predict_both_equals_pos_plus_neg():
    rng = np.random.default_rng(16)
    for _ in range(100):
        dims = [int(rng.integers(1, 5)) for _ in range(int(rng.integers(1, 4)))]
        m = int(rng.integers(1, 6))
        ens = _random_ensemble(rng, m, dims)
        trace = _random_trace(rng, dims)
        k = int(rng.integers(1, len(dims) + 1))
        both = regroup_predict(ens, trace, k, "both")
        pos = regroup_predict(ens, trace, k, "pos")
        neg = regroup_predict(ens, trace, k, "neg")
        assert np.array_equal(both.scores, pos.scores + neg.scores)


def test_predict_matches_brute_force_on_all_small_instances():
    rng = np.random.default_rng(17)
    for m in range(1, 5):
        for n in range(1, 4):
            for _ in range(6):
                dims = [int(rng.integers(1, 4)) for _ in range(n)]
                ens = _random_ensemble(rng, m, dims)
                trace = _random_trace(rng, dims)
                trace.logits = rng.normal(0, 1, m)
                for k in range(1, n + 1):
                    for mode in ("pos", "neg", "both"):
                        tally = regroup_predict(ens, trace, k, mode)
                        want_scores, want_pred = regroup_naive(
                            [p.tolist() for p in ens.pos],
                            [p.tolist() for p in ens.neg],
                            [p.tolist() for p in trace.preacts],
                            ens.delta, k, mode)
                        assert tally.scores.tolist() == want_scores
                        assert tally.prediction == want_pred


def test_predict_scores_within_bounds():
    rng = np.random.default_rng(18)
    for _ in range(50):
        dims = [int(rng.integers(1, 5)) for _ in range(3)]
        m = int(rng.integers(2, 6))
        ens = _random_ensemble(rng, m, dims)
        trace = _random_trace(rng, dims)
        k = int(rng.integers(1, 4))
        both = regroup_predict(ens, trace, k, "both")
        assert (both.scores >= 0).all() and (both.scores <= 2 * k * (m - 1)).all()
        pos = regroup_predict(ens, trace, k, "pos")
        assert (pos.scores <= k * (m - 1)).all()


def test_predict_permutation_equivariance():
    rng = np.random.default_rng(19)
    checked = 0
    for _ in range(100):
        # dims >= 2: a 1-dim layer scores every class identically, so the
        # outcome there is pure index tie-breaking, not a tie-free case
        dims = [int(rng.integers(2, 5)) for _ in range(2)]
        m = int(rng.integers(2, 6))
        ens = _random_ensemble(rng, m, dims)
        trace = _random_trace(rng, dims)
        tally = regroup_predict(ens, trace, 2, "both")
        top = np.sort(tally.scores)
        if top[-1] == top[-2]:
            continue  # tie: argmax depends on index order
        perm = rng.permutation(m)
        permuted = GenerativeEnsemble(
            num_classes=m, delta=ens.delta, layer_indices=ens.layer_indices,
            pos=[p[np.argsort(perm)] for p in ens.pos],
            neg=[p[np.argsort(perm)] for p in ens.neg])
        ptally = regroup_predict(permuted, trace, 2, "both")
        assert ptally.prediction == perm[tally.prediction]
        checked += 1
    assert checked >= 80


def test_predict_deterministic():
    rng = np.random.default_rng(20)
    dims = [3, 4]
    ens = _random_ensemble(rng, 5, dims)
    trace = _random_trace(rng, dims)
    a = regroup_predict(ens, trace, 2, "both")
    b = regroup_predict(ens, trace, 2, "both")
    assert np.array_equal(a.scores, b.scores)
    assert a.prediction == b.prediction
    assert np.array_equal(a.class_order, b.class_order)


def test_predict_k_out_of_range():
    rng = np.random.default_rng(21)
    ens = _random_ensemble(rng, 3, [2, 2])
    trace = _random_trace(rng, [2, 2])
    for bad in (0, 3, -1):
        with pytest.raises(ValidationError):
            regroup_predict(ens, trace, bad, "both")


# ---------------------------------------------------------------------------
# calibration


def _two_layer_crafted():
    """Model and data where the last votable layer always ranks the true
    class first and the first one never does. Mixed-sign first-layer weights
    keep the negative-response PMFs class-distinctive."""
    w1 = np.array([[2.0, -1.0], [-1.0, 2.0]])
    w2 = np.array([[3.0, -1.0], [-1.0, 3.0]])
    layers = [engine.Flatten(),
              engine.Linear(2, 2, weights=w1, bias=np.zeros(2)),
              engine.ReLU(),
              engine.Linear(2, 2, weights=w2, bias=np.zeros(2))]
    model = engine.NetworkModel(layers, (1, 1, 2), 2)
    model.validate()
    images = np.array([[[[1.0, 0.1]]], [[[0.1, 1.0]]]])
    labels = np.array([0, 1])
    delta = 1e-6
    sigs = []
    for j in range(2):
        trace = engine.forward_with_trace(model, images[j])
        sigs.append([core.layer_signature(p, delta, i) for i, p in enumerate(trace.preacts)])
    # layer 2 rows match the true class signature; layer 1 rows are swapped
    pos = [np.stack([sigs[1][0].pos, sigs[0][0].pos]),
           np.stack([sigs[0][1].pos, sigs[1][1].pos])]
    neg = [np.stack([sigs[1][0].neg, sigs[0][0].neg]),
           np.stack([sigs[0][1].neg, sigs[1][1].neg])]
    ens = GenerativeEnsemble(num_classes=2, delta=delta, layer_indices=[1, 3],
                             pos=pos, neg=neg)
    return model, ens, images, labels


def test_per_layer_accuracy_crafted_fixture():
    model, ens, images, labels = _two_layer_crafted()
    result = per_layer_accuracy(ens, model, images, labels)
    assert result.accuracies[0] == 0.0
    assert result.accuracies[-1] == 1.0
    assert result.used == 2 and result.skipped == 0


def test_per_layer_accuracy_single_sample():
    model, ens, images, labels = _two_layer_crafted()
    result = per_layer_accuracy(ens, model, images[:1], labels[:1])
    assert result.accuracies[-1] == 1.0


def test_per_layer_accuracy_skips_misclassified():
    model, ens, images, labels = _two_layer_crafted()
    wrong = np.array([1, 0])
    with pytest.raises(ValidationError, match="no correctly classified"):
        per_layer_accuracy(ens, model, images, wrong)
    mixed_images = np.concatenate([images, images])
    mixed_labels = np.concatenate([labels, wrong])
    result = per_layer_accuracy(ens, model, mixed_images, mixed_labels)
    assert result.used == 2 and result.skipped == 2


def test_per_layer_accuracy_flags_in_sample_overlap():
    model, images, labels = _diverse_model_and_data(22)
    ens = build_ensemble(model, images, labels, quota=3, delta=1e-6)
    result = per_layer_accuracy(ens, model, images, labels)
    assert result.in_sample is not None and result.in_sample >= 3


def test_per_layer_accuracy_empty_calibration():
    model, ens, _, _ = _two_layer_crafted()
    with pytest.raises(ValidationError):
        per_layer_accuracy(ens, model, np.zeros((0, 1, 1, 2)), np.zeros(0, dtype=int))


def test_select_k_suffix_rule():
    assert select_k(np.array([0.2, 0.9, 0.8, 0.8]), 0.75) == 3
    assert select_k(np.array([0.9, 0.9, 0.9]), 0.75) == 3
    assert select_k(np.array([0.9, 0.9, 0.1]), 0.75) == 1  # floor
    assert select_k(np.array([0.5]), 0.75) == 1
    assert select_k(np.array([0.2, 0.9, 0.8, 0.8]), 0.0) == 4


def test_select_k_empty_rejected():
    with pytest.raises(ValidationError):
        select_k(np.array([]))
