import numpy as np
import pytest
import torch

from conftest import ConstantModel, OracleModel
from ltbackdoor.augment import build_registry
from ltbackdoor.clean_selector import (choose_clean_ops, evaluate_class_accuracy,
                                       initial_schedule, update_strengths)
from ltbackdoor.data import make_synthetic_corpus
from ltbackdoor.errors import DomainError


def _schedule(scores, s_max=10, gamma=0.6):
    sched = initial_schedule(len(scores), s_max, gamma)
    return sched.__class__(scores=tuple(scores), gamma=gamma, s_max=s_max,
                           epoch=0, history=(tuple(scores),))


class TestUpdateRule:
    def test_increase_above_gamma(self):
        sched = _schedule([3])
        updated = update_strengths(sched, np.array([0.7]))
        assert updated.scores == (4,)

    def test_decrease_at_or_below_gamma(self):
        sched = _schedule([3])
        assert update_strengths(sched, np.array([0.6])).scores == (2,)
        assert update_strengths(sched, np.array([0.2])).scores == (2,)

    def test_lower_clamp(self):
        sched = _schedule([0])
        assert update_strengths(sched, np.array([0.2])).scores == (0,)

    def test_upper_clamp(self):
        sched = _schedule([10])
        assert update_strengths(sched, np.array([1.0])).scores == (10,)

    def test_exhaustive_grid_moves_by_one_with_clamp(self):
        # every (s, acc, gamma) combination obeys the +-1-with-clamp rule
        for gamma in (0.0, 0.3, 0.6, 0.9):
            for s in range(0, 11):
                for acc in np.linspace(0, 1, 21):
                    sched = _schedule([s], gamma=gamma)
                    new = update_strengths(sched, np.array([acc])).scores[0]
                    expected = min(10, s + 1) if acc > gamma else max(0, s - 1)
                    assert new == expected, (s, acc, gamma)

    def test_history_and_epoch_advance(self):
        sched = initial_schedule(2, 10, 0.6)
        stepped = update_strengths(sched, np.array([1.0, 0.0]))
        assert stepped.epoch == 1
        assert stepped.history == ((0, 0), (1, 0))

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            update_strengths(_schedule([1, 2]), np.array([0.5]))

    def test_monotone_response(self):
        # raising accuracy above gamma never lowers the next strength
        sched = _schedule([5])
        low = update_strengths(sched, np.array([0.5])).scores[0]
        high = update_strengths(sched, np.array([0.9])).scores[0]
        assert high >= low


class TestChooseOps:
    def test_zero_strength_empty(self, registry, rng):
        assert choose_clean_ops(_schedule([0]), 0, registry, rng) == []

    def test_count_and_strength(self, registry, rng):
        ops = choose_clean_ops(_schedule([2]), 0, registry, rng)
        assert len(ops) == 2
        assert all(op.strength == 2 for op in ops)
        assert len({op.operator_id for op in ops}) == 2

    def test_excess_drawn_with_replacement(self, rng):
        reg = build_registry(["hflip", "rotate"], s_max=5)
        ops = choose_clean_ops(_schedule([5], s_max=5), 0, reg, rng)
        assert len(ops) == 5
        assert {op.operator_id for op in ops} == {0, 1}

    def test_uniform_frequency(self, registry):
        # each of the 14 operators should appear with frequency 3/14
        rng = np.random.default_rng(123)
        sched = _schedule([3])
        counts = np.zeros(14)
        trials = 10000
        for _ in range(trials):
            for op in choose_clean_ops(sched, 0, registry, rng):
                counts[op.operator_id] += 1
        freqs = counts / trials
        assert np.allclose(freqs, 3 / 14, atol=0.02), freqs


class TestEvaluateAccuracy:
    def _dt(self, num_classes=3, per_class=4):
        return make_synthetic_corpus(num_classes, per_class, image_size=8, seed=0)

    def test_oracle_model_perfect(self, rng):
        images, labels = self._dt()
        model = OracleModel(images, labels, 3)
        sched = _schedule([0, 0, 0])
        acc = evaluate_class_accuracy(model, images, labels, sched,
                                      build_registry(s_max=10), rng)
        assert np.allclose(acc, 1.0)

    def test_constant_model(self, rng):
        images, labels = self._dt()
        model = ConstantModel(1, 3)
        sched = _schedule([0, 0, 0])
        acc = evaluate_class_accuracy(model, images, labels, sched,
                                      build_registry(s_max=10), rng)
        assert acc[1] == 1.0
        assert acc[0] == 0.0 and acc[2] == 0.0

    def test_zero_schedule_equals_unaugmented(self, rng):
        images, labels = self._dt()
        model = OracleModel(images, labels, 3)
        sched = _schedule([0, 0, 0])
        acc = evaluate_class_accuracy(model, images, labels, sched,
                                      build_registry(s_max=10), rng)
        with torch.no_grad():
            direct = model(images).argmax(1)
        expected = [float((direct[labels == k] == k).float().mean())
                    for k in range(3)]
        assert np.allclose(acc, expected)

    def test_missing_class_rejected(self, rng):
        images, labels = self._dt(3)
        keep = labels != 2
        sched = _schedule([0, 0, 0])
        with pytest.raises(DomainError):
            evaluate_class_accuracy(OracleModel(images, labels, 3),
                                    images[keep], labels[keep], sched,
                                    build_registry(s_max=10), rng)
