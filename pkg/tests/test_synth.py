import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cate.errors import DomainError, ValidationError
from cate.synth import (
    GaussianPair,
    WorldSpec,
    gaussian_mi_oracle,
    generate_world,
    linear_gaussian_channel_mi,
    tumor_count,
)


def small_spec(**kw):
    base = dict(dim=8, bags_per_site=4, patches_per_bag=(10, 20), sites_ind=["A1"], sites_ood=["B1"])
    base.update(kw)
    return WorldSpec(**base)


def test_world_is_deterministic():
    spec = small_spec(seed=7)
    _, bags1, gt1 = generate_world(spec)
    _, bags2, gt2 = generate_world(spec)
    assert [b.id for b in bags1] == [b.id for b in bags2]
    for a, b in zip(bags1, bags2):
        assert a.features.tobytes() == b.features.tobytes()
        assert a.label == b.label
    for key in gt1.tumor_masks:
        assert np.array_equal(gt1.tumor_masks[key], gt2.tumor_masks[key])


def test_different_seed_changes_world():
    _, bags1, _ = generate_world(small_spec(seed=1))
    _, bags2, _ = generate_world(small_spec(seed=2))
    assert bags1[0].features.tobytes() != bags2[0].features.tobytes()


def test_anchor_norms_and_counts():
    bank, bags, _ = generate_world(small_spec(num_classes=3, anchors_per_class=4, num_agnostic=6))
    assert bank.m == 12 and bank.n == 6
    norms = np.linalg.norm(bank.all_vectors, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-6)
    assert len(bags) == 4 * 2


def test_tumor_mask_count():
    spec = small_spec(tumor_fraction=0.3, patches_per_bag=(100, 100))
    _, bags, gt = generate_world(spec)
    for b in bags:
        assert b.n_patches == 100
        assert gt.tumor_masks[b.id].sum() == 30


def test_tumor_count_edge_cases():
    assert tumor_count(100, 0.3) == 30
    assert tumor_count(3, 0.01) == 1
    assert tumor_count(5, 1.0) == 5


def test_site_offsets_scale_with_nuisance():
    _, _, gt = generate_world(small_spec(nuisance_strength=2.5))
    for off in gt.site_offsets.values():
        assert np.linalg.norm(off) == pytest.approx(2.5)
    _, _, gt0 = generate_world(small_spec(nuisance_strength=0.0))
    for off in gt0.site_offsets.values():
        assert np.all(off == 0)


def test_tumor_patches_sit_near_class_anchor():
    spec = small_spec(noise_sigma=0.01, nuisance_strength=0.0)
    bank, bags, gt = generate_world(spec)
    bag = bags[0]
    mask = gt.tumor_masks[bag.id]
    anchors = bank.anchors_for(bag.label)
    sims = bag.features[mask] @ anchors.T
    assert np.all(sims.max(axis=1) > 0.9)


def test_no_shift_means_ind_and_ood_class_means_match():
    spec = small_spec(dim=8, nuisance_strength=0.0, bags_per_site=40, noise_sigma=0.3,
                      sites_ind=["A1", "A2"], sites_ood=["B1", "B2"])
    _, bags, _ = generate_world(spec)

    def separation(sites):
        means = {}
        for c in (0, 1):
            feats = np.vstack([b.features.mean(0) for b in bags if b.site in sites and b.label == c])
            means[c] = feats.mean(0)
        return np.linalg.norm(means[0] - means[1])

    assert separation(spec.sites_ind) == pytest.approx(separation(spec.sites_ood), abs=0.08)


@pytest.mark.parametrize(
    "field,value",
    [
        ("tumor_fraction", 0.0),
        ("tumor_fraction", 1.5),
        ("nuisance_strength", -1.0),
        ("noise_sigma", 0.0),
        ("dim", 0),
        ("patches_per_bag", (5, 2)),
    ],
)
def test_invalid_spec_names_field(field, value):
    with pytest.raises(ValidationError, match=field):
        small_spec(**{field: value})


def test_overlapping_sites_rejected():
    with pytest.raises(ValidationError, match="sites"):
        small_spec(sites_ind=["A1"], sites_ood=["A1"])


def test_gaussian_mi_oracle_values():
    assert gaussian_mi_oracle(GaussianPair(0.0, 1)) == 0.0
    assert gaussian_mi_oracle(GaussianPair(0.9, 1)) == pytest.approx(-0.5 * math.log(0.19))
    assert gaussian_mi_oracle(GaussianPair(0.9, 1)) == pytest.approx(0.83037, abs=1e-5)
    assert gaussian_mi_oracle(GaussianPair(0.5, 4)) == pytest.approx(0.57536, abs=1e-5)


@given(st.floats(min_value=-0.999, max_value=0.999), st.integers(1, 16))
def test_gaussian_mi_oracle_symmetric(rho, dim):
    assert gaussian_mi_oracle(rho, dim) == gaussian_mi_oracle(-rho, dim)


@pytest.mark.parametrize("rho", [1.0, -1.0, 1.2])
def test_gaussian_mi_domain(rho):
    with pytest.raises(DomainError):
        GaussianPair(rho)


def test_gaussian_mi_oracle_matches_sample_covariance_formula(rng):
    # MI of jointly Gaussian (a, b) = 0.5 * ln(det Sa det Sb / det S) on the empirical covariance
    pair = GaussianPair(0.7, 1)
    a, b = pair.sample(400_000, rng)
    cov = np.cov(np.hstack([a, b]).T)
    est = 0.5 * math.log(cov[0, 0] * cov[1, 1] / np.linalg.det(cov))
    assert est == pytest.approx(gaussian_mi_oracle(pair), abs=0.01)


def test_linear_gaussian_channel_mi_values():
    assert linear_gaussian_channel_mi(np.zeros((3, 3)), 1.0) == 0.0
    assert linear_gaussian_channel_mi(np.eye(1), 1.0) == pytest.approx(0.5 * math.log(2))
    assert linear_gaussian_channel_mi(2 * np.eye(2), 1.0) == pytest.approx(math.log(5), abs=1e-12)
    assert linear_gaussian_channel_mi(2 * np.eye(2), 1.0) == pytest.approx(1.60944, abs=1e-5)


def test_linear_gaussian_channel_mi_matches_entropy_difference(rng):
    # I = h(alpha) - h(alpha | x) for alpha = Wx + eps, computed from the output covariance
    w = rng.standard_normal((3, 5))
    sigma = 0.7
    cov_out = w @ w.T + sigma**2 * np.eye(3)
    expected = 0.5 * (np.linalg.slogdet(cov_out)[1] - 3 * math.log(sigma**2))
    assert linear_gaussian_channel_mi(w, sigma) == pytest.approx(expected, rel=1e-12)


def test_linear_gaussian_channel_rejects_bad_input():
    with pytest.raises(ValidationError):
        linear_gaussian_channel_mi(np.array([[np.nan]]), 1.0)
    with pytest.raises(ValidationError):
        linear_gaussian_channel_mi(np.eye(2), 0.0)
