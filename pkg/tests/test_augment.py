import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ltbackdoor.augment import (DEFAULT_OPERATORS, AugOperation, apply_pipeline,
                                build_registry)
from ltbackdoor.errors import ConfigError, DomainError


def _rand_image(seed, channels=3, size=12):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(channels, size, size, generator=g)


def test_default_registry_counts():
    reg = build_registry(s_max=10)
    assert reg.n_operators == 14
    assert reg.n_operations == 140


def test_degenerate_registry():
    reg = build_registry(["hflip"], s_max=1)
    assert reg.n_operators == 1
    assert reg.n_operations == 1


def test_unknown_operator_rejected():
    with pytest.raises(ConfigError):
        build_registry(["hflip", "frobnicate"])


def test_bad_s_max_rejected():
    with pytest.raises(ConfigError):
        build_registry(s_max=0)


def test_empty_operator_list_rejected():
    with pytest.raises(ConfigError):
        build_registry([])


def test_slice_has_all_operators_at_strength(registry):
    s = registry.operations_at_strength(3)
    assert len(s) == 14
    assert all(op.strength == 3 for op in s.operations)
    assert sorted(op.operator_id for op in s.operations) == list(range(14))


def test_slice_strength_zero_is_identity(registry, image, rng):
    s = registry.operations_at_strength(0)
    assert len(s) == 14
    for op in s.operations:
        assert torch.equal(registry.apply(op, image, rng), image)


def test_slice_out_of_range(registry):
    with pytest.raises(DomainError):
        registry.operations_at_strength(registry.s_max + 1)
    with pytest.raises(DomainError):
        registry.operations_at_strength(-1)


@settings(max_examples=60, deadline=None)
@given(op_index=st.integers(0, 13), strength=st.integers(1, 10),
       seed=st.integers(0, 2**31))
def test_output_range_and_shape(op_index, strength, seed):
    reg = build_registry(s_max=10)
    img = _rand_image(seed)
    out = reg.apply(AugOperation(op_index, strength), img,
                    np.random.default_rng(seed))
    assert out.shape == img.shape
    assert float(out.min()) >= 0.0
    assert float(out.max()) <= 1.0


@pytest.mark.parametrize("name", DEFAULT_OPERATORS)
def test_magnitude_monotone(name):
    reg = build_registry([name], s_max=10)
    spec = reg.operators[0]
    mags = [spec.magnitude(s, reg.s_max) for s in range(0, 11)]
    assert all(b >= a for a, b in zip(mags, mags[1:]))


def test_empty_pipeline_identity(registry, image, rng):
    assert torch.equal(apply_pipeline(registry, [], image, rng), image)


def test_flip_is_involution(registry, image, rng):
    flip_id = DEFAULT_OPERATORS.index("hflip")
    ops = [AugOperation(flip_id, 5), AugOperation(flip_id, 5)]
    out = apply_pipeline(registry, ops, image, rng)
    assert torch.equal(out, image)


def test_pipeline_deterministic(registry, image):
    ops = [AugOperation(1, 7), AugOperation(6, 3), AugOperation(11, 9)]
    a = apply_pipeline(registry, ops, image, np.random.default_rng(7))
    b = apply_pipeline(registry, ops, image, np.random.default_rng(7))
    assert torch.equal(a, b)


def test_apply_rejects_bad_shapes(registry, rng):
    with pytest.raises(DomainError):
        registry.apply(AugOperation(0, 1), torch.rand(16, 16), rng)


def test_apply_rejects_foreign_operation(registry, image, rng):
    with pytest.raises(DomainError):
        registry.apply(AugOperation(99, 1), image, rng)
    with pytest.raises(DomainError):
        registry.apply(AugOperation(0, registry.s_max + 1), image, rng)


def test_photometric_ops_change_image(registry, image, rng):
    # at full strength every non-flip operator should actually move pixels
    for i, spec in enumerate(registry.operators):
        if spec.name in ("hflip",):
            continue
        out = registry.apply(AugOperation(i, registry.s_max), image,
                             np.random.default_rng(1))
        assert not torch.equal(out, image), spec.name
