"""Multi-label keyword predictor: encoding, thresholding, F1, training."""

from types import SimpleNamespace

import numpy as np
import pytest

from retinagen.autodiff import AdamState, adam_step, backward, zero_grad
from retinagen.data import ImageConfig
from retinagen.errors import ConfigError, DataError
from retinagen.keywords import (
    KeywordPredictor,
    PredictorSpec,
    RESERVED_SLOTS,
    micro_f1,
    multi_hot,
    threshold_scores,
)
from retinagen.text import KeywordSet, Vocabulary


class TestMultiHot:
    def test_slots_are_ids_minus_reserved(self):
        vec = multi_hot(KeywordSet((4, 6)), n_labels=4)
        assert vec.tolist() == [1.0, 0.0, 1.0, 0.0]

    def test_reserved_ids_ignored(self):
        vec = multi_hot(KeywordSet((0, 3, 5)), n_labels=3)
        assert vec.tolist() == [0.0, 1.0, 0.0]

    def test_empty_keyword_set(self):
        assert multi_hot(KeywordSet(), n_labels=2).tolist() == [0.0, 0.0]


class TestThreshold:
    def test_above_threshold_selected(self):
        picked = threshold_scores(np.array([0.9, 0.1, 0.7]), threshold=0.5, fallback_k=1)
        assert picked == [0, 2]

    def test_fallback_when_nothing_clears(self):
        picked = threshold_scores(np.array([0.2, 0.4, 0.1, 0.3]), threshold=0.5, fallback_k=2)
        assert picked == [1, 3]

    def test_fallback_tie_prefers_lower_slot(self):
        picked = threshold_scores(np.array([0.3, 0.3, 0.3]), threshold=0.5, fallback_k=2)
        assert picked == [0, 1]

    def test_fallback_capped_by_label_count(self):
        picked = threshold_scores(np.array([0.2, 0.1]), threshold=0.9, fallback_k=5)
        assert picked == [0, 1]

    def test_result_sorted_even_when_scores_are_not(self):
        picked = threshold_scores(np.array([0.6, 0.9, 0.8]), threshold=0.5, fallback_k=1)
        assert picked == [0, 1, 2]


class TestMicroF1:
    def test_perfect_match(self):
        gold = [KeywordSet((4, 5))]
        assert micro_f1(gold, gold) == pytest.approx(1.0)

    def test_disjoint_is_zero(self):
        assert micro_f1([KeywordSet((4,))], [KeywordSet((5,))]) == 0.0

    def test_hand_value(self):
        # tp=1, fp=1, fn=1 -> 2*1 / (2*1 + 1 + 1) = 0.5
        assert micro_f1([KeywordSet((4, 5))], [KeywordSet((4, 6))]) == pytest.approx(0.5)

    def test_pools_over_samples(self):
        # sample 1: tp=1; sample 2: fp=1, fn=1 -> 2/(2+1+1) = 0.5
        pred = [KeywordSet((4,)), KeywordSet((5,))]
        gold = [KeywordSet((4,)), KeywordSet((6,))]
        assert micro_f1(pred, gold) == pytest.approx(0.5)

    def test_reserved_ids_do_not_count(self):
        # the null placeholder matching itself is not a true positive
        assert micro_f1([KeywordSet((0,))], [KeywordSet((0,))]) == 0.0

    def test_empty_everything_is_zero(self):
        assert micro_f1([KeywordSet()], [KeywordSet()]) == 0.0

    def test_length_mismatch_rejected(self):
        a = [KeywordSet((4,))]
        with pytest.raises(DataError):
            micro_f1(a, a + a)


class TestSpec:
    def test_round_trip(self):
        spec = PredictorSpec(hidden=32, threshold=0.4, fallback_k=2)
        assert PredictorSpec.from_dict(spec.to_dict()) == spec

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"hidden": 0},
            {"threshold": 0.0},
            {"threshold": 1.0},
            {"fallback_k": 0},
        ],
    )
    def test_bad_values_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            PredictorSpec(**kwargs)


IMG_CFG = ImageConfig(size=8, patch=4, channels=1)


class TestPredictor:
    def test_requires_real_labels(self):
        with pytest.raises(ConfigError):
            KeywordPredictor(PredictorSpec(), Vocabulary(), IMG_CFG, seed=0)

    def test_scores_shape_and_range(self):
        vocab = Vocabulary(["edema", "drusen", "hemorrhage"])
        model = KeywordPredictor(PredictorSpec(hidden=16), vocab, IMG_CFG, seed=1)
        feats = np.random.default_rng(0).random((IMG_CFG.regions, IMG_CFG.region_dim))
        scores = model.scores(feats)
        assert scores.shape == (3,)
        assert np.all(scores > 0.0) and np.all(scores < 1.0)

    def test_seeded_init_is_deterministic(self):
        vocab = Vocabulary(["edema", "drusen"])
        a = KeywordPredictor(PredictorSpec(hidden=16), vocab, IMG_CFG, seed=7)
        b = KeywordPredictor(PredictorSpec(hidden=16), vocab, IMG_CFG, seed=7)
        assert list(a.params) == list(b.params)
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)

    def test_predict_returns_canonical_keywordset(self):
        vocab = Vocabulary(["edema", "drusen", "hemorrhage"])
        model = KeywordPredictor(PredictorSpec(hidden=16), vocab, IMG_CFG, seed=1)
        feats = np.random.default_rng(3).random((IMG_CFG.regions, IMG_CFG.region_dim))
        pred = model.predict(feats)
        assert isinstance(pred, KeywordSet)
        assert len(pred.ids) >= 1
        assert all(i >= RESERVED_SLOTS for i in pred.ids)

    def test_loss_is_positive_scalar(self):
        vocab = Vocabulary(["edema", "drusen"])
        model = KeywordPredictor(PredictorSpec(hidden=16), vocab, IMG_CFG, seed=1)
        rng = np.random.default_rng(0)
        batch = [
            SimpleNamespace(
                features=rng.random((IMG_CFG.regions, IMG_CFG.region_dim)),
                keywords=KeywordSet((4,)),
            )
            for _ in range(3)
        ]
        loss = model.loss(batch)
        assert loss.data.shape == ()
        assert float(loss.data) > 0.0

    def test_overfits_visual_rule(self):
        # Label 0 is on exactly when the first patch is bright.  A tiny MLP
        # trained on 16 samples should recover the rule on held-out inputs.
        vocab = Vocabulary(["bright"])
        model = KeywordPredictor(PredictorSpec(hidden=16, fallback_k=1), vocab, IMG_CFG, seed=2)
        rng = np.random.default_rng(5)

        def sample():
            feats = rng.random((IMG_CFG.regions, IMG_CFG.region_dim)) * 0.2
            lit = rng.random() < 0.5
            if lit:
                feats[0] += 0.8
            return SimpleNamespace(
                features=feats,
                keywords=KeywordSet((4,)) if lit else KeywordSet(),
            )

        train = [sample() for _ in range(16)]
        state = AdamState()
        for _ in range(120):
            zero_grad(model.params)
            loss = model.loss(train)
            backward(loss)
            adam_step(model.params, state, lr=3e-2)

        hits = 0
        for _ in range(20):
            held_out = sample()
            want_on = 4 in held_out.keywords.ids
            got_on = model.scores(held_out.features)[0] > 0.5
            hits += want_on == got_on
        assert hits >= 18
