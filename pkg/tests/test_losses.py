import numpy as np
import pytest

import oracles
from dcot.losses import (
    DomainError,
    LossFamily,
    ObservationSet,
    loss_gradient,
    loss_lipschitz,
    loss_value,
)
from dcot.similarity import SimilarityModel, mode_similarity


def make_problem(rng, shape=(3, 3, 3), density=0.7, family="gaussian"):
    x = rng.standard_normal(shape)
    if family == "bernoulli":
        x = (x > 0).astype(float)
    elif family == "poisson":
        x = rng.poisson(3.0, shape).astype(float)
    elif family == "gamma":
        x = rng.gamma(2.0, 1.0, shape) + 0.1
    mask = rng.random(shape) < density
    mask.flat[0] = True
    omega = ObservationSet.from_dense(x, mask)
    feats = [rng.standard_normal((s, 2)) for s in shape]
    sim = SimilarityModel(per_mode=[mode_similarity(f) for f in feats])
    return omega, sim


def positive_z(rng, shape, low=0.5, high=3.0):
    return low + (high - low) * rng.random(shape)


class TestObservationSet:
    def test_duplicate_rejected(self):
        with pytest.raises(ValueError):
            ObservationSet.from_entries([((0, 0), 1.0), ((0, 0), 2.0)], (2, 2))

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            ObservationSet.from_entries([((2, 0), 1.0)], (2, 2))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            ObservationSet.from_entries([((0, 0), np.nan)], (2, 2))

    def test_family_domains(self):
        omega = ObservationSet.from_entries([((0,), 0.5)], (2,))
        LossFamily("gaussian").validate_observations(omega)
        with pytest.raises(DomainError):
            LossFamily("bernoulli").validate_observations(omega)
        with pytest.raises(DomainError):
            LossFamily("poisson").validate_observations(omega)
        neg = ObservationSet.from_entries([((0,), -1.0)], (2,))
        with pytest.raises(DomainError):
            LossFamily("gamma").validate_observations(neg)


class TestLossValue:
    def test_gaussian_at_mean_is_variance(self, rng):
        shape = (3, 3)
        x = rng.standard_normal(shape)
        omega = ObservationSet.from_dense(x)
        sim = SimilarityModel.ones(shape)  # uniform weights over observations
        z = np.full(shape, x.mean())
        value = loss_value(LossFamily("gaussian"), sim, omega, z)
        assert np.isclose(value, x.var())

    def test_bernoulli_at_zero_is_log2(self, rng):
        shape = (2, 3)
        x = (rng.random(shape) > 0.5).astype(float)
        omega = ObservationSet.from_dense(x)
        sim = SimilarityModel.ones(shape)
        value = loss_value(LossFamily("bernoulli"), sim, omega, np.zeros(shape))
        assert np.isclose(value, np.log(2.0) - x.mean() * 0.0 + 0.0 - (0.0))
        assert np.isclose(value, np.log(2.0))

    def test_poisson_plugin(self):
        shape = (2, 2)
        x = np.full(shape, 3.0)
        omega = ObservationSet.from_dense(x)
        sim = SimilarityModel.ones(shape)
        value = loss_value(LossFamily("poisson"), sim, omega, np.full(shape, 3.0))
        assert np.isclose(value, 3.0 - 3.0 * np.log(3.0))

    def test_domain_violation(self, rng):
        omega, sim = make_problem(rng, family="poisson")
        z = -np.ones(omega.shape)
        with pytest.raises(DomainError):
            loss_value(LossFamily("poisson"), sim, omega, z)
        with pytest.raises(DomainError):
            loss_gradient(LossFamily("gamma"), sim, omega, z)

    def test_shape_mismatch(self, rng):
        omega, sim = make_problem(rng)
        with pytest.raises(ValueError):
            loss_value(LossFamily("gaussian"), sim, omega, np.zeros((2, 2)))

    def test_gaussian_convex_midpoint(self, rng):
        omega, sim = make_problem(rng)
        fam = LossFamily("gaussian")
        z1, z2 = rng.standard_normal(omega.shape), rng.standard_normal(omega.shape)
        mid = loss_value(fam, sim, omega, 0.5 * (z1 + z2))
        avg = 0.5 * (loss_value(fam, sim, omega, z1) + loss_value(fam, sim, omega, z2))
        assert mid <= avg + 1e-12


class TestLossGradient:
    def test_gaussian_zero_at_weighted_mean(self, rng):
        omega, sim = make_problem(rng)
        from dcot.similarity import smoothing_moments

        mom = smoothing_moments(sim, omega)
        grad = loss_gradient(LossFamily("gaussian"), sim, omega, mom.weighted_x)
        assert np.abs(grad).max() < 1e-14

    def test_poisson_zero_at_weighted_mean(self, rng):
        omega, sim = make_problem(rng, family="poisson")
        from dcot.similarity import smoothing_moments

        mom = smoothing_moments(sim, omega)
        z = np.maximum(mom.weighted_x, 1e-6)
        grad = loss_gradient(LossFamily("poisson"), sim, omega, z)
        # zero wherever the weighted mean is interior (positive)
        interior = mom.weighted_x > 1e-6
        assert np.abs(grad[interior]).max() < 1e-12

    @pytest.mark.parametrize("family", ["gaussian", "bernoulli", "poisson", "gamma"])
    def test_matches_finite_differences(self, family, rng):
        omega, sim = make_problem(rng, family=family)
        fam = LossFamily(family)
        if family in ("poisson", "gamma"):
            z = positive_z(rng, omega.shape)
        else:
            z = rng.standard_normal(omega.shape)
        grad = loss_gradient(fam, sim, omega, z)
        fd = oracles.central_difference(lambda zz: loss_value(fam, sim, omega, zz), z)
        denom = max(np.abs(fd).max(), 1e-12)
        assert np.abs(grad - fd).max() / denom < 1e-5

    def test_descent_direction(self, rng):
        omega, sim = make_problem(rng)
        fam = LossFamily("gaussian")
        z = rng.standard_normal(omega.shape)
        grad = loss_gradient(fam, sim, omega, z)
        before = loss_value(fam, sim, omega, z)
        after = loss_value(fam, sim, omega, z - 1e-3 * grad)
        assert after < before


class TestLossLipschitz:
    def test_gaussian_normalized(self, rng):
        shape = (2, 2, 2)
        x = rng.standard_normal(shape)
        omega = ObservationSet.from_dense(x)
        sim = SimilarityModel.neutral(shape)
        lf = loss_lipschitz(LossFamily("gaussian"), sim, omega)
        assert np.isclose(lf, 2.0 / 8.0)

    def test_bernoulli_single_cell(self):
        shape = (1,)
        omega = ObservationSet.from_entries([((0,), 1.0)], shape)
        sim = SimilarityModel.neutral(shape)
        lf = loss_lipschitz(LossFamily("bernoulli"), sim, omega)
        assert np.isclose(lf, 0.25)

    def test_unnormalized_scales_linearly(self, rng):
        shape = (3, 3)
        x = rng.standard_normal(shape)
        omega = ObservationSet.from_dense(x)
        ones = SimilarityModel.ones(shape, normalized=False)
        half_modes = [
            type(m)(s=0.5 * m.s, c=m.c) for m in ones.per_mode[:1]
        ] + ones.per_mode[1:]
        half = SimilarityModel(per_mode=half_modes, normalized=False)
        lf_full = loss_lipschitz(LossFamily("gaussian"), ones, omega)
        lf_half = loss_lipschitz(LossFamily("gaussian"), half, omega)
        assert np.isclose(lf_full, 2.0 * lf_half)

    def test_positive_families_need_floor(self, rng):
        omega, sim = make_problem(rng, family="poisson")
        with pytest.raises(ValueError):
            loss_lipschitz(LossFamily("poisson"), sim, omega)
        lf = loss_lipschitz(LossFamily("poisson"), sim, omega, z_min=0.5)
        assert lf > 0

    @pytest.mark.parametrize("family", ["gaussian", "bernoulli", "poisson", "gamma"])
    def test_bounds_actual_gradient_jumps(self, family, rng):
        omega, sim = make_problem(rng, family=family)
        fam = LossFamily(family)
        z_min = 0.5
        lf = loss_lipschitz(fam, sim, omega, z_min=z_min)
        for _ in range(10):
            z1 = positive_z(rng, omega.shape) if family in ("poisson", "gamma") else \
                rng.standard_normal(omega.shape)
            z2 = positive_z(rng, omega.shape) if family in ("poisson", "gamma") else \
                rng.standard_normal(omega.shape)
            g1 = loss_gradient(fam, sim, omega, z1)
            g2 = loss_gradient(fam, sim, omega, z2)
            lhs = np.linalg.norm(g1 - g2)
            assert lhs <= lf * np.linalg.norm(z1 - z2) + 1e-12
