import numpy as np
import pytest

import oracles
from dcot.losses import LossFamily, ObservationSet, loss_gradient
from dcot.model import (
    DcotModel,
    InitStrategy,
    SliceGroup,
    SubjectPartition,
    initial_model,
    reconstruct,
    tie_satisfied,
)
from dcot.prox import Penalty, prox_apply
from dcot.similarity import SimilarityModel, smoothing_moments
from dcot.solver import (
    BlockPenalties,
    SolverAbort,
    SolverConfig,
    core_gradient,
    estimate_moduli,
    factor_gradient,
    lagrangian_value,
    residual_tensor,
    solve,
    update_cores,
    update_dual,
    update_factor,
    update_z,
)
from dcot.evaluate import SynthSpec, rmse, synthesize
from dcot.tensor import multilinear_product


def random_state(rng, shape=(3, 2, 2), ranks=(2, 2, 2), partition=None):
    factors = [rng.standard_normal((s, r)) for s, r in zip(shape, ranks)]
    g = rng.standard_normal(ranks)
    h = rng.standard_normal(ranks)
    if partition is not None:
        from dcot.model import tie_heterogeneous_core

        h = tie_heterogeneous_core(h, partition, "mean")
    model = DcotModel(factors, g, h, partition)
    z = rng.standard_normal(shape)
    y = rng.standard_normal(shape)
    return model, z, y


def coupling_value(model, z, y, gamma):
    r = reconstruct(model) - z - y / gamma
    return 0.5 * gamma * float((r**2).sum())


class TestResidualTensor:
    def test_feasible_zero_dual(self, rng):
        model, _, _ = random_state(rng)
        z = reconstruct(model)
        assert np.allclose(residual_tensor(model, z, np.zeros_like(z), 2.0), 0.0)

    def test_dual_cancellation(self, rng):
        model, z, _ = random_state(rng)
        gamma = 1.7
        y = gamma * (reconstruct(model) - z)
        assert np.abs(residual_tensor(model, z, y, gamma)).max() < 1e-12

    def test_direct_formula(self, rng):
        model, z, y = random_state(rng)
        gamma = 0.9
        expected = gamma * (
            multilinear_product(model.core_g + model.core_h, model.factors) - z
            - y / gamma
        )
        assert np.allclose(residual_tensor(model, z, y, gamma), expected, atol=1e-12)


class TestGradients:
    def test_zero_residual_means_zero_gradients(self, rng):
        model, _, _ = random_state(rng)
        z = reconstruct(model)
        y = np.zeros_like(z)
        for n in range(3):
            assert np.abs(factor_gradient(model, z, y, 1.0, n)).max() < 1e-12
        assert np.abs(core_gradient(model, z, y, 1.0)).max() < 1e-12

    def test_factor_gradient_linear_in_residual(self, rng):
        model, z, y = random_state(rng)
        g1 = factor_gradient(model, z, y, 1.0, 0)
        # doubling gamma and y doubles the residual tensor, hence the gradient
        g2 = factor_gradient(model, z, 2 * y, 2.0, 0)
        assert np.allclose(g2, 2 * g1, atol=1e-10)

    @pytest.mark.parametrize("mode", [0, 1, 2])
    def test_factor_gradient_matches_finite_differences(self, mode, rng):
        model, z, y = random_state(rng, shape=(4, 3, 2), ranks=(2, 2, 2))
        gamma = 1.3

        def value(u):
            probe = model.copy()
            probe.factors[mode] = u
            return coupling_value(probe, z, y, gamma)

        grad = factor_gradient(model, z, y, gamma, mode)
        fd = oracles.central_difference(value, model.factors[mode])
        assert np.abs(grad - fd).max() / max(np.abs(fd).max(), 1e-12) < 1e-5

    def test_core_gradient_matches_finite_differences(self, rng):
        model, z, y = random_state(rng, shape=(4, 3, 2), ranks=(2, 2, 2))
        gamma = 0.8

        def value_g(g):
            probe = model.copy()
            probe.core_g = g
            return coupling_value(probe, z, y, gamma)

        grad = core_gradient(model, z, y, gamma)
        fd = oracles.central_difference(value_g, model.core_g)
        assert np.abs(grad - fd).max() / max(np.abs(fd).max(), 1e-12) < 1e-5

    def test_core_gradient_shared_between_cores(self, rng):
        model, z, y = random_state(rng)
        gamma = 1.1

        def value_h(h):
            probe = model.copy()
            probe.core_h = h
            return coupling_value(probe, z, y, gamma)

        grad = core_gradient(model, z, y, gamma)
        fd = oracles.central_difference(value_h, model.core_h)
        assert np.abs(grad - fd).max() / max(np.abs(fd).max(), 1e-12) < 1e-5

    def test_core_gradient_is_projection_for_orthonormal_factors(self, rng):
        from dcot.model import project_core

        shape, ranks = (4, 4, 3), (2, 2, 2)
        factors = [np.linalg.qr(rng.standard_normal((s, r)))[0] for s, r in zip(shape, ranks)]
        model = DcotModel(factors, rng.standard_normal(ranks), rng.standard_normal(ranks))
        z = rng.standard_normal(shape)
        y = rng.standard_normal(shape)
        m = residual_tensor(model, z, y, 1.6)
        assert np.allclose(core_gradient(model, z, y, 1.6), project_core(m, factors),
                           atol=1e-12)


class TestBlockUpdates:
    def test_no_penalty_zero_gradient_keeps_factor(self, rng):
        model, _, _ = random_state(rng)
        z = reconstruct(model)
        y = np.zeros_like(z)
        got = update_factor(model, z, y, 1.0, 0, 2.0, Penalty.none())
        assert np.allclose(got, model.factors[0], atol=1e-12)

    def test_no_penalty_is_exact_gradient_step(self, rng):
        model, z, y = random_state(rng)
        rho = 3.0
        grad = factor_gradient(model, z, y, 1.0, 1)
        got = update_factor(model, z, y, 1.0, 1, rho, Penalty.none())
        assert np.allclose(got, model.factors[1] - grad / rho, atol=1e-12)

    def test_l1_penalty_is_soft_thresholded_step(self, rng):
        model, z, y = random_state(rng)
        rho, pen = 2.5, Penalty.l1(0.7)
        grad = factor_gradient(model, z, y, 1.0, 0)
        expected = prox_apply(pen, model.factors[0] - grad / rho, rho)
        got = update_factor(model, z, y, 1.0, 0, rho, pen)
        assert np.array_equal(got, expected)

    def test_cores_fixed_point_when_feasible(self, rng):
        part = SubjectPartition(0, (SliceGroup((0, 1)),))
        model, _, _ = random_state(rng, partition=part)
        z = reconstruct(model)
        y = np.zeros_like(z)
        g, h = update_cores(model, z, y, 1.0, 2.0, 2.0, Penalty.none(), Penalty.none())
        assert np.allclose(g, model.core_g, atol=1e-12)
        assert np.allclose(h, model.core_h, atol=1e-12)
        assert tie_satisfied(h, part)

    def test_huge_l1_zeroes_core(self, rng):
        model, z, y = random_state(rng)
        g, _ = update_cores(model, z, y, 1.0, 1.0, 1.0, Penalty.l1(1e6), Penalty.none())
        assert np.array_equal(g, np.zeros_like(g))

    def test_tie_constraint_bitwise_after_update(self, rng):
        part = SubjectPartition(1, (SliceGroup((0, 1)),))
        model, z, y = random_state(rng, partition=part)
        for reducer in ("mean", "representative"):
            _, h = update_cores(model, z, y, 1.3, 2.0, 2.0, Penalty.none(),
                                Penalty.l1(0.1), reducer)
            assert tie_satisfied(h, part)


class TestUpdateZ:
    def make(self, rng, family="gaussian", shape=(2, 3, 2)):
        model, z, y = random_state(rng, shape=shape, ranks=(2, 2, 2))
        if family in ("poisson", "gamma"):
            x = rng.poisson(3.0, shape).astype(float) if family == "poisson" else \
                rng.gamma(2.0, 1.0, shape) + 0.1
        elif family == "bernoulli":
            x = (rng.random(shape) > 0.5).astype(float)
        else:
            x = rng.standard_normal(shape)
        omega = ObservationSet.from_dense(x)
        sim = SimilarityModel.ones(shape)
        return model, z, y, omega, sim

    def test_gamma_to_infinity_limit(self, rng):
        model, z, y, omega, sim = self.make(rng)
        gamma = 1e8
        center = reconstruct(model) - y / gamma
        got = update_z(model, z, y, gamma, LossFamily("gaussian"), sim, omega)
        assert np.abs(got - center).max() < 1e-6

    def test_closed_form_matches_quasi_newton(self, rng):
        model, z, y, omega, sim = self.make(rng)
        fam = LossFamily("gaussian")
        closed = update_z(model, z, y, 0.7, fam, sim, omega, z_solver="closed_form")
        qn = update_z(model, z, y, 0.7, fam, sim, omega, z_solver="quasi_newton",
                      qn_max_inner=500, qn_grad_tol=1e-12)
        assert np.abs(closed - qn).max() < 1e-8

    def test_scalar_grid_oracle(self, rng):
        shape = (1,)
        model = DcotModel([np.array([[1.0]])], np.array([0.3]), np.array([0.2]))
        omega = ObservationSet.from_entries([((0,), 1.7)], shape)
        sim = SimilarityModel.neutral(shape)
        fam = LossFamily("gaussian")
        z = np.array([0.0])
        y = np.array([0.4])
        gamma = 0.9
        got = update_z(model, z, y, gamma, fam, sim, omega)
        from dcot.losses import loss_value

        qs = np.linspace(-5, 5, 200001)
        center = reconstruct(model) - y / gamma
        vals = [
            loss_value(fam, sim, omega, np.array([q]))
            + 0.5 * gamma * (q - center[0]) ** 2
            for q in qs
        ]
        assert abs(got[0] - qs[int(np.argmin(vals))]) < 1e-4

    @pytest.mark.parametrize("family", ["bernoulli", "poisson", "gamma"])
    def test_quasi_newton_first_order_condition(self, family, rng):
        model, z, y, omega, sim = self.make(rng, family=family)
        fam = LossFamily(family)
        gamma = 0.8
        z0 = np.abs(z) + 0.5 if family in ("poisson", "gamma") else z
        got = update_z(model, z0, y, gamma, fam, sim, omega,
                       qn_max_inner=300, qn_grad_tol=1e-6, z_floor=1e-8)
        center = reconstruct(model) - y / gamma
        grad = loss_gradient(fam, sim, omega, got) + gamma * (got - center)
        interior = got > 1e-8 if family in ("poisson", "gamma") else np.ones_like(got, bool)
        assert np.abs(grad[interior]).max() <= 1e-6 + 1e-12

    def test_closed_form_rejected_for_non_gaussian(self, rng):
        model, z, y, omega, sim = self.make(rng, family="poisson")
        with pytest.raises(ValueError):
            update_z(model, z, y, 1.0, LossFamily("poisson"), sim, omega,
                     z_solver="closed_form")


class TestUpdateDual:
    def test_feasible_keeps_dual(self, rng):
        model, _, y = random_state(rng)
        z = reconstruct(model)
        assert np.allclose(update_dual(model, z, y, 2.0), y, atol=1e-12)

    def test_zero_dual_unit_gamma(self, rng):
        model, z, _ = random_state(rng)
        got = update_dual(model, z, np.zeros_like(z), 1.0)
        assert np.allclose(got, -(reconstruct(model) - z), atol=1e-12)

    def test_optimality_identity_after_exact_z_step(self, rng):
        # with an exact gaussian z step the new dual equals minus the loss
        # gradient at the new z
        model, z, y, omega, sim = TestUpdateZ().make(rng)
        fam = LossFamily("gaussian")
        gamma = 0.6
        z_new = update_z(model, z, y, gamma, fam, sim, omega)
        y_new = update_dual(model, z_new, y, gamma)
        grad = loss_gradient(fam, sim, omega, z_new)
        assert np.abs(y_new + grad).max() <= 1e-8


class TestLagrangian:
    def test_feasible_no_penalties_is_loss(self, rng):
        from dcot.losses import loss_value

        model, _, y, omega, sim = TestUpdateZ().make(rng)
        z = reconstruct(model)
        fam = LossFamily("gaussian")
        got = lagrangian_value(model, z, y, 1.2, fam, sim, omega, BlockPenalties())
        assert np.isclose(got, loss_value(fam, sim, omega, z), atol=1e-12)

    def test_dual_shift_invariant_at_feasible_point(self, rng):
        model, _, y, omega, sim = TestUpdateZ().make(rng)
        z = reconstruct(model)
        fam = LossFamily("gaussian")
        a = lagrangian_value(model, z, y, 1.2, fam, sim, omega, BlockPenalties())
        b = lagrangian_value(model, z, y + 3.0, 1.2, fam, sim, omega, BlockPenalties())
        assert np.isclose(a, b, atol=1e-10)

    def test_term_by_term_oracle(self, rng):
        from dcot.losses import loss_value
        from dcot.prox import penalty_value

        model, z, y, omega, sim = TestUpdateZ().make(rng)
        fam = LossFamily("gaussian")
        pen = BlockPenalties(g=Penalty.l1(0.3), h=Penalty.frob_sq(0.2),
                             factors=Penalty.l1(0.05))
        gamma = 0.9
        got = lagrangian_value(model, z, y, gamma, fam, sim, omega, pen)
        r = reconstruct(model) - z
        expected = (
            loss_value(fam, sim, omega, z)
            + penalty_value(pen.g, model.core_g)
            + penalty_value(pen.h, model.core_h)
            + sum(penalty_value(pen.factor(n, 3), u) for n, u in enumerate(model.factors))
            - float((y * r).sum())
            + 0.5 * gamma * float((r**2).sum())
        )
        assert np.isclose(got, expected, atol=1e-10)

    def test_indicator_violation_is_infinite(self, rng):
        model, z, y, omega, sim = TestUpdateZ().make(rng)
        model.core_g[0, 0, 0] = -1.0
        pen = BlockPenalties(g=Penalty.nonneg())
        got = lagrangian_value(model, z, y, 1.0, LossFamily("gaussian"), sim, omega, pen)
        assert got == np.inf


class TestEstimateModuli:
    def make_cfg(self, **kw):
        return SolverConfig(**kw)

    def test_zero_model_floor(self, rng):
        shape, ranks = (3, 3), (2, 2)
        model = DcotModel([np.zeros((3, 2))] * 2, np.zeros(ranks), np.zeros(ranks))
        omega = ObservationSet.from_dense(rng.standard_normal(shape))
        sim = SimilarityModel.neutral(shape)
        cfg = estimate_moduli(model, self.make_cfg(), LossFamily("gaussian"), sim, omega)
        assert cfg.rho_g == 1e-8
        assert all(r == 1e-8 for r in cfg.rho_factors)

    def test_single_mode_hand_computation(self, rng):
        core = np.array([1.0, -2.0])
        model = DcotModel([rng.standard_normal((4, 2))], core.copy(), core.copy())
        omega = ObservationSet.from_dense(rng.standard_normal((4,)))
        sim = SimilarityModel.neutral((4,))
        cfg = self.make_cfg(gamma=2.0, lipschitz_safety=1.0)
        got = estimate_moduli(model, cfg, LossFamily("gaussian"), sim, omega)
        s = model.core_g + model.core_h
        assert np.isclose(got.rho_factors[0], 2.0 * float(s @ s), rtol=1e-6)

    def test_doubling_gamma_doubles_moduli(self, rng):
        model, z, y = random_state(rng)
        omega = ObservationSet.from_dense(rng.standard_normal((3, 2, 2)))
        sim = SimilarityModel.neutral((3, 2, 2))
        fam = LossFamily("gaussian")
        a = estimate_moduli(model, self.make_cfg(gamma=1.0), fam, sim, omega)
        b = estimate_moduli(model, self.make_cfg(gamma=2.0), fam, sim, omega)
        assert np.isclose(b.rho_g, 2 * a.rho_g, rtol=1e-6)
        assert np.allclose(np.array(b.rho_factors), 2 * np.array(a.rho_factors),
                           rtol=1e-6)

    def test_gamma_lifted_above_loss_lipschitz(self, rng):
        from dcot.losses import loss_lipschitz

        model, _, _ = random_state(rng)
        omega = ObservationSet.from_dense(rng.standard_normal((3, 2, 2)))
        sim = SimilarityModel.neutral((3, 2, 2))
        fam = LossFamily("gaussian")
        cfg = estimate_moduli(model, self.make_cfg(gamma=0.0), fam, sim, omega)
        assert cfg.gamma > 2.0 * loss_lipschitz(fam, sim, omega)

    def test_explicit_moduli_kept(self, rng):
        model, _, _ = random_state(rng)
        omega = ObservationSet.from_dense(rng.standard_normal((3, 2, 2)))
        sim = SimilarityModel.neutral((3, 2, 2))
        cfg = estimate_moduli(model, self.make_cfg(rho_g=7.0), LossFamily("gaussian"),
                              sim, omega)
        assert cfg.rho_g == 7.0


def planted_problem(seed=1, shape=(8, 8, 8), sigma=0.0, missing=0.0):
    part = SubjectPartition(0, (SliceGroup((0, 1)), SliceGroup((2,)),))
    spec = SynthSpec(shape=shape, ranks=(3, 3, 3), partition=part,
                     subject_core_scale=1.0, noise_sigma=sigma,
                     missing_fraction=missing, seed=seed)
    return synthesize(spec), part


class TestSolve:
    def test_zero_iterations_returns_init(self, rng):
        data, part = planted_problem()
        init = initial_model(data.observed.to_dense(0.0), (3, 3, 3),
                             InitStrategy("hosvd"), part)
        res = solve(data.observed, init, LossFamily("gaussian"),
                    SimilarityModel.neutral(data.observed.shape),
                    SolverConfig(max_iters=0))
        assert len(res.trace) == 1
        assert np.array_equal(res.model.core_g, init.core_g)
        assert all(np.array_equal(a, b) for a, b in zip(res.model.factors, init.factors))

    def test_planted_noiseless_recovery(self):
        data, part = planted_problem()
        init = initial_model(data.observed.to_dense(0.0), (3, 3, 3),
                             InitStrategy("hosvd"), part)
        res = solve(data.observed, init, LossFamily("gaussian"),
                    SimilarityModel.neutral(data.observed.shape),
                    SolverConfig(max_iters=500))
        assert res.trace.rows[-1].primal_residual <= 1e-6
        assert rmse(reconstruct(res.model), data.observed) <= 1e-4
        if res.converged:
            last = res.trace.rows[-1]
            total = np.sqrt(last.z_step**2 + last.factor_step**2
                            + last.core_g_step**2 + last.core_h_step**2)
            assert total <= res.config.tol_step

    def test_deterministic_trace(self):
        data, part = planted_problem(seed=3, sigma=0.05, missing=0.2)
        init = initial_model(data.observed.to_dense(float(data.observed.values.mean())),
                             (3, 3, 3), InitStrategy("hosvd"), part)
        cfg = SolverConfig(max_iters=40)
        fam = LossFamily("gaussian")
        a = solve(data.observed, init, fam, data.sim, cfg)
        b = solve(data.observed, init, fam, data.sim, cfg)
        for ra, rb in zip(a.trace.rows, b.trace.rows):
            assert ra.lagrangian == rb.lagrangian
            assert ra.primal_residual == rb.primal_residual

    def test_tie_preserved_every_iteration(self):
        data, part = planted_problem(seed=5, sigma=0.1, missing=0.3)
        init = initial_model(data.observed.to_dense(float(data.observed.values.mean())),
                             (3, 3, 3), InitStrategy("hosvd"), part)

        # run iteration by iteration via max_iters steps and check the tie
        for iters in (1, 3, 7):
            res = solve(data.observed, init, LossFamily("gaussian"), data.sim,
                        SolverConfig(max_iters=iters))
            assert tie_satisfied(res.model.core_h, part)

    def test_descent_and_dual_primal_bound(self):
        from dcot.losses import loss_lipschitz

        data, part = planted_problem(seed=2, sigma=0.05, missing=0.3)
        mom = smoothing_moments(data.sim, data.observed)
        lf = loss_lipschitz(LossFamily("gaussian"), mom, data.observed)
        init = initial_model(data.observed.to_dense(float(data.observed.values.mean())),
                             (3, 3, 3), InitStrategy("hosvd"), part)
        cfg = SolverConfig(gamma=2.1 * lf, max_iters=60, fixed_moduli=True,
                           tol_primal=0.0, tol_step=0.0)
        res = solve(data.observed, init, LossFamily("gaussian"), data.sim, cfg)
        lag = res.trace.column("lagrangian")
        assert np.all(np.diff(lag) <= 1e-10)
        dy = res.trace.column("dual_step")[1:]
        dz = res.trace.column("z_step")[1:]
        assert np.all(dy <= lf * dz + 1e-8)

    def test_freeze_h_keeps_zero_core(self):
        data, part = planted_problem(seed=4, sigma=0.05, missing=0.2)
        init = initial_model(data.observed.to_dense(float(data.observed.values.mean())),
                             (3, 3, 3), InitStrategy("hosvd"), part)
        res = solve(data.observed, init, LossFamily("gaussian"), data.sim,
                    SolverConfig(max_iters=10, freeze_h=True))
        assert np.array_equal(res.model.core_h, np.zeros((3, 3, 3)))

    def test_divergence_safeguard_raises(self):
        data, part = planted_problem(seed=6, sigma=0.05, missing=0.2)
        init = initial_model(data.observed.to_dense(float(data.observed.values.mean())),
                             (3, 3, 3), InitStrategy("hosvd"), part)
        # absurdly small explicit moduli force uphill steps
        cfg = SolverConfig(max_iters=200, rho_g=1e-9, rho_h=1e-9,
                           rho_factors=(1e-9, 1e-9, 1e-9), fixed_moduli=True)
        with pytest.raises(SolverAbort):
            solve(data.observed, init, LossFamily("gaussian"), data.sim, cfg)

    def test_poisson_family_runs(self):
        part = SubjectPartition(0, (SliceGroup((0, 1)),))
        spec = SynthSpec(shape=(6, 6, 6), ranks=(2, 2, 2), partition=part,
                         noise_family="poisson", missing_fraction=0.2, seed=8)
        data = synthesize(spec)
        init = initial_model(data.observed.to_dense(float(data.observed.values.mean())),
                             (2, 2, 2), InitStrategy("hosvd"), part)
        # the curvature bound, and hence gamma, scales with 1/z_floor^2, so a
        # data-scale floor keeps the run usable
        cfg = SolverConfig(max_iters=15, z_floor=0.5, qn_max_inner=200,
                           qn_grad_tol=1e-6)
        res = solve(data.observed, init, LossFamily("poisson"), data.sim, cfg)
        assert np.isfinite(res.trace.column("lagrangian")).all()
        assert res.z.min() >= 0.5 - 1e-12
