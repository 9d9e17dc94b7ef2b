import json

import numpy as np
import pytest
import torch

from ltbackdoor.data import (LongTailDataset, build_longtail, empty_poison_plan,
                             load_image_folder, load_packed, longtail_counts,
                             make_synthetic_corpus, sample_selector_set,
                             select_poison_subset, write_manifest)
from ltbackdoor.errors import ConfigError, DomainError


def _balanced(num_classes=3, per_class=100, size=8):
    return make_synthetic_corpus(num_classes, per_class, image_size=size, seed=1)


def _longtail(counts=(100, 50, 25), size=8, seed=0):
    images, labels = _balanced(len(counts), max(counts), size)
    ir = counts[0] / counts[-1]
    return build_longtail(images, labels, ir, np.random.default_rng(seed),
                          n_max=counts[0])


class TestLongtailCounts:
    def test_exact_powers(self):
        assert list(longtail_counts(100, 3, 4)) == [100, 50, 25]

    def test_ir_endpoint(self):
        counts = longtail_counts(5000, 10, 50)
        assert counts[0] == 5000
        assert counts[-1] == 100  # n_max / ir

    def test_balanced_when_ir_one(self):
        assert list(longtail_counts(100, 5, 1)) == [100] * 5

    def test_counts_non_increasing(self):
        counts = longtail_counts(500, 10, 50)
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_rejects_ir_below_one(self):
        with pytest.raises(ConfigError):
            longtail_counts(100, 3, 0.5)

    def test_step_profile(self):
        assert list(longtail_counts(100, 4, 10, profile="step")) == [100, 100, 10, 10]


class TestBuildLongtail:
    def test_profile_matches(self):
        ds = _longtail()
        assert list(ds.counts) == [100, 50, 25]
        assert ds.imbalance_ratio == pytest.approx(4.0)

    def test_insufficient_source_rejected(self):
        images, labels = _balanced(3, 50)
        with pytest.raises(ConfigError):
            build_longtail(images, labels, 4, np.random.default_rng(0), n_max=100)

    def test_deterministic_given_seed(self):
        a = _longtail(seed=5)
        b = _longtail(seed=5)
        assert torch.equal(a.images, b.images)

    def test_profiles_match_labels(self):
        ds = _longtail()
        recount = np.bincount(ds.labels.numpy())
        assert list(recount) == [p.count for p in ds.profiles]


class TestPoisonSelection:
    def test_size(self):
        ds = _longtail((500, 300, 200))
        plan = select_poison_subset(ds, 0.1, 0, np.random.default_rng(0))
        assert len(plan) == round(0.1 * len(ds))

    def test_same_seed_same_indices(self):
        ds = _longtail()
        a = select_poison_subset(ds, 0.1, 0, np.random.default_rng(3))
        b = select_poison_subset(ds, 0.1, 0, np.random.default_rng(3))
        assert a.poison_indices == b.poison_indices

    def test_relabel_is_constant(self):
        plan = empty_poison_plan(2)
        assert all(plan.relabel(y) == 2 for y in range(10))

    def test_clean_view_disjoint(self):
        ds = _longtail()
        plan = select_poison_subset(ds, 0.2, 0, np.random.default_rng(1))
        clean = set(plan.clean_indices(len(ds)).tolist())
        assert clean.isdisjoint(plan.poison_indices)
        assert len(clean) + len(plan) == len(ds)

    def test_rate_bounds(self):
        ds = _longtail()
        with pytest.raises(ConfigError):
            select_poison_subset(ds, 0.0, 0, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            select_poison_subset(ds, 1.0, 0, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            select_poison_subset(ds, 0.001, 0, np.random.default_rng(0))

    def test_poison_counts_proportional_to_class_sizes(self):
        # chi-square against expected counts proportional to n_k over
        # many draws; independently validates the label-agnostic draw
        ds = _longtail((100, 50, 25))
        rng = np.random.default_rng(11)
        totals = np.zeros(3)
        draws = 1000
        for _ in range(draws):
            plan = select_poison_subset(ds, 0.1, 0, rng)
            labels = ds.labels.numpy()[list(plan.poison_indices)]
            totals += np.bincount(labels, minlength=3)
        expected = draws * round(0.1 * len(ds)) * ds.counts / ds.counts.sum()
        chi2 = float(((totals - expected) ** 2 / expected).sum())
        # 2 dof, alpha = 0.001 -> critical value 13.8
        assert chi2 < 13.8, (totals, expected)


class TestSelectorSet:
    def test_no_clamp(self):
        ds = _longtail((100, 50, 25))
        idx = sample_selector_set(ds, 10, np.random.default_rng(0))
        counts = np.bincount(ds.labels.numpy()[idx], minlength=3)
        assert list(counts) == [10, 10, 10]

    def test_clamp_on_tail(self):
        ds = _longtail((100, 50, 25))
        idx = sample_selector_set(ds, 30, np.random.default_rng(0))
        counts = np.bincount(ds.labels.numpy()[idx], minlength=3)
        assert list(counts) == [30, 30, 25]

    def test_deterministic(self):
        ds = _longtail()
        a = sample_selector_set(ds, 5, np.random.default_rng(9))
        b = sample_selector_set(ds, 5, np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_rejects_zero(self):
        ds = _longtail()
        with pytest.raises(ConfigError):
            sample_selector_set(ds, 0, np.random.default_rng(0))


class TestCorpusAndIO:
    def test_synthetic_shapes_and_range(self):
        images, labels = make_synthetic_corpus(4, 6, image_size=8, seed=0)
        assert images.shape == (24, 3, 8, 8)
        assert float(images.min()) >= 0 and float(images.max()) <= 1
        assert list(np.bincount(labels.numpy())) == [6] * 4

    def test_synthetic_deterministic(self):
        a, _ = make_synthetic_corpus(3, 4, seed=7)
        b, _ = make_synthetic_corpus(3, 4, seed=7)
        assert torch.equal(a, b)

    def test_packed_roundtrip(self, tmp_path):
        images, labels = _balanced(3, 5)
        path = tmp_path / "corpus.npz"
        np.savez(path, images=images.numpy(), labels=labels.numpy())
        loaded_images, loaded_labels = load_packed(path)
        assert torch.equal(loaded_images, images)
        assert torch.equal(loaded_labels, labels)

    def test_packed_uint8_and_channel_last(self, tmp_path):
        raw = (np.random.default_rng(0).random((6, 8, 8, 3)) * 255).astype(np.uint8)
        labels = np.array([0, 0, 1, 1, 2, 2])
        path = tmp_path / "u8.npz"
        np.savez(path, images=raw, labels=labels)
        images, _ = load_packed(path)
        assert images.shape == (6, 3, 8, 8)
        assert images.dtype == torch.float32

    def test_packed_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_packed(tmp_path / "absent.npz")

    def test_image_folder(self, tmp_path):
        from PIL import Image
        for cls in ("a", "b"):
            d = tmp_path / cls
            d.mkdir()
            for i in range(3):
                arr = (np.random.default_rng(i).random((8, 8, 3)) * 255).astype(np.uint8)
                Image.fromarray(arr).save(d / f"{i}.png")
        images, labels = load_image_folder(tmp_path)
        assert images.shape == (6, 3, 8, 8)
        assert labels.tolist() == [0, 0, 0, 1, 1, 1]

    def test_manifest(self, tmp_path):
        ds = _longtail()
        plan = select_poison_subset(ds, 0.1, 1, np.random.default_rng(0))
        path = tmp_path / "manifest.json"
        write_manifest(path, ds, plan, seed=3, config_hash="abc123")
        manifest = json.loads(path.read_text())
        assert manifest["config_hash"] == "abc123"
        assert manifest["class_counts"] == [100, 50, 25]
        assert manifest["poison"]["indices"] == list(plan.poison_indices)

    def test_class_index_bounds(self):
        ds = _longtail()
        with pytest.raises(DomainError):
            ds.indices_of_class(99)
