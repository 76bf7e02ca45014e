"""Linearized multi-block ADMM for penalized double-core factorization.

Each iteration sweeps the blocks in Gauss-Seidel order

    U_1, ..., U_N  ->  core_g  ->  core_h (tied)  ->  z  ->  dual y,

where every factor/core update is one proximal gradient step on the
quadratic coupling term

    (gamma / 2) * || recon - z - y / gamma ||^2,

linearized at the current point with per-block step ``1 / rho``.  The
``z`` update minimizes smoothed loss + coupling exactly (a closed form
for the gaussian family, limited-memory BFGS otherwise) and the dual
ascends along the constraint residual.

Sign conventions: with the augmented Lagrangian written as
``F + penalties - <y, recon - z> + (gamma/2) ||recon - z||^2`` and the
dual update ``y <- y - gamma * (recon - z)``, solving the z block exactly
makes the new dual equal *minus* the loss gradient at the new ``z``,
which is what bounds dual steps by primal steps.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.optimize

from .losses import LossFamily, ObservationSet, loss_gradient, loss_lipschitz, loss_value
from .model import DcotModel, reconstruct, tie_heterogeneous_core
from .prox import Penalty, penalty_value, prox_apply
from .similarity import Moments, SimilarityModel, smoothing_moments
from .tensor import frob_inner, frob_norm, matricize, n_mode_product

log = logging.getLogger("dcot.solver")

_MODULI_FLOOR = 1e-8


class SolverAbort(RuntimeError):
    """The augmented Lagrangian diverged past the safeguard."""

    def __init__(self, message: str, trace: "ConvergenceTrace | None" = None):
        super().__init__(message)
        self.trace = trace


class InnerSolveError(RuntimeError):
    """The z subproblem's inner solver missed its gradient tolerance."""

    def __init__(self, achieved: float, tolerance: float):
        super().__init__(
            f"inner z solve reached gradient norm {achieved:.3e} "
            f"(tolerance {tolerance:.3e})"
        )
        self.achieved = achieved
        self.tolerance = tolerance


@dataclass(frozen=True)
class BlockPenalties:
    """Penalty per optimization block: shared core, subject core, factors.

    ``factors`` is either a single penalty applied to every factor matrix
    or one penalty per mode.
    """

    g: Penalty = field(default_factory=Penalty.none)
    h: Penalty = field(default_factory=Penalty.none)
    factors: tuple[Penalty, ...] | Penalty = field(default_factory=Penalty.none)

    def factor(self, mode: int, n_modes: int) -> Penalty:
        if isinstance(self.factors, Penalty):
            return self.factors
        if len(self.factors) != n_modes:
            raise ValueError("need one factor penalty per mode")
        return self.factors[mode]


@dataclass(frozen=True)
class SolverConfig:
    """Solver knobs; unset moduli/tolerances are estimated from the problem.

    ``gamma`` is lifted to at least ``2.1 * L_F`` (the loss gradient's
    Lipschitz bound) by :func:`estimate_moduli`; per-block moduli default
    to ``lipschitz_safety`` times the spectral-norm bound of each block's
    coupling curvature.  By default they are refreshed from the current
    state block by block inside every sweep (``moduli_period`` > 1 keeps
    them for that many iterations; stale moduli can understate the
    curvature when factor norms drift and send the sweep uphill).
    ``fixed_moduli`` pins them to the initial estimate for the whole run.
    """

    gamma: float = 0.0
    rho_g: float | None = None
    rho_h: float | None = None
    rho_factors: tuple[float, ...] | None = None
    penalties: BlockPenalties = field(default_factory=BlockPenalties)
    max_iters: int = 500
    tol_primal: float | None = None
    tol_step: float = 1e-8
    lipschitz_safety: float = 1.1
    fixed_moduli: bool = False
    moduli_period: int = 1
    z_solver: str = "auto"  # auto | closed_form | quasi_newton
    qn_memory: int = 10
    qn_max_inner: int = 50
    qn_grad_tol: float | None = None
    z_floor: float = 1e-6
    tie_reducer: str = "mean"
    dual_init: str = "gradient"  # gradient | zero
    freeze_h: bool = False
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.z_solver not in ("auto", "closed_form", "quasi_newton"):
            raise ValueError(f"unknown z solver {self.z_solver!r}")
        if self.dual_init not in ("gradient", "zero"):
            raise ValueError(f"unknown dual init {self.dual_init!r}")
        if self.tie_reducer not in ("mean", "representative"):
            raise ValueError(f"unknown tie reducer {self.tie_reducer!r}")
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")
        if self.moduli_period < 1:
            raise ValueError("moduli_period must be at least 1")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    lagrangian: float
    loss: float
    primal_residual: float
    z_step: float
    dual_step: float
    factor_step: float
    core_g_step: float
    core_h_step: float
    wall_time: float


class ConvergenceTrace:
    """Append-only per-iteration diagnostics.

    ``write_csv`` omits the wall-time column so that repeated runs with
    the same seeds produce byte-identical files.
    """

    CSV_FIELDS = (
        "iteration",
        "lagrangian",
        "loss",
        "primal_residual",
        "z_step",
        "dual_step",
        "factor_step",
        "core_g_step",
        "core_h_step",
    )

    def __init__(self):
        self.rows: list[TraceRow] = []

    def append(self, row: TraceRow) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def write_csv(self, path) -> None:
        lines = [",".join(self.CSV_FIELDS)]
        for r in self.rows:
            lines.append(
                ",".join(
                    repr(float(getattr(r, f))) if f != "iteration" else str(r.iteration)
                    for f in self.CSV_FIELDS
                )
            )
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


@dataclass
class SolverState:
    """One mutable working copy owned by the solve loop."""

    model: DcotModel
    z: np.ndarray
    y: np.ndarray
    iteration: int = 0
    trace: ConvergenceTrace = field(default_factory=ConvergenceTrace)


@dataclass(frozen=True)
class SolverResult:
    model: DcotModel
    z: np.ndarray
    trace: ConvergenceTrace
    y: np.ndarray
    config: SolverConfig
    converged: bool
    reason: str


def residual_tensor(model: DcotModel, z, y, gamma: float) -> np.ndarray:
    """The scaled coupling residual ``gamma * (recon - z - y / gamma)``."""
    return gamma * (reconstruct(model) - z) - y


def factor_gradient(model: DcotModel, z, y, gamma: float, mode: int) -> np.ndarray:
    """Gradient of the coupling term with respect to factor ``mode``.

    Computed as the mode-``mode`` matricization of the residual projected
    through every other factor's transpose, times the transposed core-sum
    matricization; this avoids forming any explicit Kronecker product.
    """
    m = residual_tensor(model, z, y, gamma)
    for t, u in enumerate(model.factors):
        if t != mode:
            m = n_mode_product(m, u.T, t)
    s = model.core_g + model.core_h
    return matricize(m, mode) @ matricize(s, mode).T


def core_gradient(model: DcotModel, z, y, gamma: float) -> np.ndarray:
    """Gradient of the coupling term w.r.t. either core (they coincide).

    This is the residual projected onto the factor basis, i.e. the
    adjoint (transposed) factor maps applied mode by mode.
    """
    m = residual_tensor(model, z, y, gamma)
    for t, u in enumerate(model.factors):
        m = n_mode_product(m, u.T, t)
    return m


def update_factor(
    model: DcotModel, z, y, gamma: float, mode: int, rho: float, penalty: Penalty
) -> np.ndarray:
    """One linearized proximal step on factor ``mode``."""
    if rho <= 0:
        raise ValueError("factor modulus must be positive")
    grad = factor_gradient(model, z, y, gamma, mode)
    return prox_apply(penalty, model.factors[mode] - grad / rho, rho)


def update_cores(
    model: DcotModel,
    z,
    y,
    gamma: float,
    rho_g: float,
    rho_h: float,
    penalty_g: Penalty,
    penalty_h: Penalty,
    reducer: str = "mean",
) -> tuple[np.ndarray, np.ndarray]:
    """Proximal steps on both cores, with the subject core tied afterwards.

    The subject core's gradient is recomputed after the shared core's
    update (Gauss-Seidel order).
    """
    if rho_g <= 0 or rho_h <= 0:
        raise ValueError("core moduli must be positive")
    work = model.copy()
    g_new = prox_apply(
        penalty_g, work.core_g - core_gradient(work, z, y, gamma) / rho_g, rho_g
    )
    work.core_g = g_new
    h_new = prox_apply(
        penalty_h, work.core_h - core_gradient(work, z, y, gamma) / rho_h, rho_h
    )
    if model.partition is not None:
        h_new = tie_heterogeneous_core(h_new, model.partition, reducer)
    return g_new, h_new


def update_z(
    model: DcotModel,
    z,
    y,
    gamma: float,
    family: LossFamily,
    sim,
    omega: ObservationSet,
    *,
    z_solver: str = "auto",
    z_floor: float = 1e-6,
    qn_memory: int = 10,
    qn_max_inner: int = 50,
    qn_grad_tol: float = 1e-8,
) -> np.ndarray:
    """Solve the z block: smoothed loss plus the quadratic coupling.

    The proximal center is ``recon - y / gamma``.  For the gaussian family
    the minimizer is the elementwise closed form; other families run
    warm-started L-BFGS-B (with a ``z >= z_floor`` bound for the positive
    families) to max-norm gradient tolerance ``qn_grad_tol``.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    center = reconstruct(model) - y / gamma
    mom = sim if isinstance(sim, Moments) else smoothing_moments(sim, omega)
    if z_solver == "auto":
        z_solver = "closed_form" if family.kind == "gaussian" else "quasi_newton"
    if z_solver == "closed_form":
        if family.kind != "gaussian":
            raise ValueError("closed-form z update applies to the gaussian family")
        count = mom.count
        return (2.0 * mom.weighted_x / count + gamma * center) / (
            2.0 * mom.weight_sum / count + gamma
        )

    bounded = family.kind in ("poisson", "gamma")
    shape = omega.shape
    x0 = np.asarray(z, dtype=float)
    if bounded:
        x0 = np.maximum(x0, z_floor)

    def objective(flat: np.ndarray):
        zz = flat.reshape(shape)
        with np.errstate(over="ignore"):
            val = loss_value(family, mom, omega, zz)
            val += 0.5 * gamma * float(((zz - center) ** 2).sum())
            grad = loss_gradient(family, mom, omega, zz) + gamma * (zz - center)
        return val, grad.ravel()

    bounds = [(z_floor, None)] * x0.size if bounded else None
    res = scipy.optimize.minimize(
        objective,
        x0.ravel(),
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={
            "maxcor": qn_memory,
            "maxiter": qn_max_inner,
            "ftol": 0.0,
            "gtol": qn_grad_tol,
        },
    )
    z_new = res.x.reshape(shape)
    if bounded:
        z_new = np.maximum(z_new, z_floor)
    grad = loss_gradient(family, mom, omega, z_new) + gamma * (z_new - center)
    if bounded:
        grad = np.where((z_new <= z_floor) & (grad > 0), 0.0, grad)
    achieved = float(np.abs(grad).max())
    if achieved > qn_grad_tol:
        raise InnerSolveError(achieved, qn_grad_tol)
    return z_new


def update_dual(model: DcotModel, z, y, gamma: float) -> np.ndarray:
    """Dual ascent step ``y - gamma * (recon - z)``."""
    return y - gamma * (reconstruct(model) - z)


def lagrangian_value(
    model: DcotModel,
    z,
    y,
    gamma: float,
    family: LossFamily,
    sim,
    omega: ObservationSet,
    penalties: BlockPenalties,
) -> float:
    """Loss + penalties - <y, recon - z> + (gamma/2) ||recon - z||^2."""
    r = reconstruct(model) - z
    value = loss_value(family, sim, omega, z)
    value += penalty_value(penalties.g, model.core_g)
    value += penalty_value(penalties.h, model.core_h)
    n_modes = len(model.factors)
    for n, u in enumerate(model.factors):
        value += penalty_value(penalties.factor(n, n_modes), u)
    value -= frob_inner(y, r)
    value += 0.5 * gamma * frob_inner(r, r)
    return value


def _spectral_norm(a: np.ndarray, iters: int = 50, tol: float = 1e-8) -> float:
    """Largest singular value by power iteration on the Gram matrix.

    Falls back to the Frobenius norm (a valid upper bound) when the
    iteration has not settled within the budget.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0 or not a.any():
        return 0.0
    v = np.random.default_rng(0).standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    prev = 0.0
    for _ in range(iters):
        w = a.T @ (a @ v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
        if abs(lam - prev) <= tol * max(lam, 1.0):
            return math.sqrt(lam)
        prev = lam
    return float(np.linalg.norm(a))


def estimate_moduli(
    model: DcotModel,
    config: SolverConfig,
    family: LossFamily,
    sim,
    omega: ObservationSet,
) -> SolverConfig:
    """Fill unset step parameters from the current state.

    ``gamma`` becomes ``max(config.gamma, 2.1 * L_F)``.  Each block's
    modulus is ``gamma`` times the squared spectral-norm bound of its
    coupling map (core-sum matricization times the other factors for a
    factor block, the product of all factor norms for the cores),
    multiplied by ``lipschitz_safety`` and floored away from zero.
    Explicitly set moduli are kept.
    """
    z_min = config.z_floor if family.kind in ("poisson", "gamma") else None
    lf = loss_lipschitz(family, sim, omega, z_min=z_min)
    gamma = max(config.gamma, 2.0 * lf * 1.05)
    safety = config.lipschitz_safety
    u_norms = [_spectral_norm(u) for u in model.factors]
    s = model.core_g + model.core_h
    rho_factors = list(config.rho_factors) if config.rho_factors else None
    if rho_factors is None:
        rho_factors = []
        for n in range(len(model.factors)):
            others = math.prod(u_norms[:n] + u_norms[n + 1 :])
            bound = gamma * (_spectral_norm(matricize(s, n)) * others) ** 2
            rho_factors.append(max(bound * safety, _MODULI_FLOOR))
    core_bound = gamma * math.prod(u_norms) ** 2
    rho_core = max(core_bound * safety, _MODULI_FLOOR)
    return replace(
        config,
        gamma=gamma,
        rho_g=config.rho_g if config.rho_g is not None else rho_core,
        rho_h=config.rho_h if config.rho_h is not None else rho_core,
        rho_factors=tuple(rho_factors),
    )


def _initial_z(omega: ObservationSet, family: LossFamily, z_floor: float) -> np.ndarray:
    """Observed values with a neutral fill for the unobserved cells.

    The positive families are projected onto their domain floor so the
    first loss gradient (and the dual initialization) stays bounded.
    """
    if family.kind == "bernoulli":
        fill = 0.0
    else:
        fill = float(omega.values.mean()) if len(omega) else 0.0
    z = omega.to_dense(fill)
    if family.kind in ("poisson", "gamma"):
        z = np.maximum(z, z_floor)
    return z


def solve(
    omega: ObservationSet,
    init: DcotModel,
    family: LossFamily,
    sim: SimilarityModel,
    config: SolverConfig,
) -> SolverResult:
    """Run the full block sweep until tolerance or the iteration budget.

    Returns the final model, estimate ``z``, dual variable, per-iteration
    trace, and the effective configuration (estimated moduli filled in).
    """
    family.validate_observations(omega)
    if omega.shape != tuple(u.shape[0] for u in init.factors):
        raise ValueError("initial model shape does not match the data shape")
    if config.rho_factors is not None and len(config.rho_factors) != len(init.factors):
        raise ValueError("need one factor modulus per mode")
    mom = smoothing_moments(sim, omega)
    model = init.copy()
    if config.freeze_h:
        model.core_h = np.zeros_like(model.core_h)
    z = _initial_z(omega, family, config.z_floor)
    if config.dual_init == "gradient":
        y = -loss_gradient(family, mom, omega, z)
    else:
        y = np.zeros(omega.shape)
    state = SolverState(model=model, z=z, y=y)

    cfg = estimate_moduli(model, config, family, mom, omega)
    gamma = cfg.gamma
    tol_primal = cfg.tol_primal
    if tol_primal is None:
        tol_primal = 1e-6 * float(np.linalg.norm(omega.values))
    scale = float(np.sqrt(np.mean(omega.values**2))) if len(omega) else 1.0
    grad_tol = cfg.qn_grad_tol if cfg.qn_grad_tol is not None else 1e-8 * max(1.0, scale)
    pen = cfg.penalties
    n_modes = len(model.factors)

    trace = state.trace

    def diagnostics(it, lagr_args, steps, started):
        lagr = lagrangian_value(*lagr_args, family, mom, omega, pen)
        return TraceRow(
            iteration=it,
            lagrangian=lagr,
            loss=loss_value(family, mom, omega, lagr_args[1]),
            primal_residual=frob_norm(reconstruct(lagr_args[0]) - lagr_args[1]),
            z_step=steps[0],
            dual_step=steps[1],
            factor_step=steps[2],
            core_g_step=steps[3],
            core_h_step=steps[4],
            wall_time=time.perf_counter() - started,
        )

    started = time.perf_counter()
    row = diagnostics(0, (model, z, y, gamma), (0.0, 0.0, 0.0, 0.0, 0.0), started)
    trace.append(row)
    initial_lagr = row.lagrangian
    guard = cfg.divergence_factor * (abs(initial_lagr) + 1.0)

    # Working copies of the moduli.  Unless pinned (fixed mode or explicit
    # values), they are refreshed from the current state inside the sweep:
    # the coupling is exactly quadratic in each block, so a bound computed
    # at the block's own evaluation point guarantees a descent step, while
    # stale bounds understate the curvature once factor norms drift.
    rho_factors = list(cfg.rho_factors)
    rho_g, rho_h = cfg.rho_g, cfg.rho_h
    refresh_factors = [
        not cfg.fixed_moduli and config.rho_factors is None for _ in range(n_modes)
    ]
    refresh_g = not cfg.fixed_moduli and config.rho_g is None
    refresh_h = not cfg.fixed_moduli and config.rho_h is None
    u_norms = [_spectral_norm(u) for u in model.factors]
    safety = cfg.lipschitz_safety

    converged = False
    reason = "max_iters"
    for k in range(1, cfg.max_iters + 1):
        refresh = (k - 1) % cfg.moduli_period == 0
        factor_sq = 0.0
        core_sum = model.core_g + model.core_h
        for n in range(n_modes):
            if refresh and refresh_factors[n]:
                others = math.prod(u_norms[:n] + u_norms[n + 1 :])
                bound = gamma * (_spectral_norm(matricize(core_sum, n)) * others) ** 2
                rho_factors[n] = max(bound * safety, _MODULI_FLOOR)
            u_new = update_factor(
                model, z, y, gamma, n, rho_factors[n], pen.factor(n, n_modes)
            )
            factor_sq += float(((u_new - model.factors[n]) ** 2).sum())
            model.factors[n] = u_new
            u_norms[n] = _spectral_norm(u_new)
        if refresh:
            core_bound = max(gamma * math.prod(u_norms) ** 2 * safety, _MODULI_FLOOR)
            if refresh_g:
                rho_g = core_bound
            if refresh_h:
                rho_h = core_bound
        g_old, h_old = model.core_g, model.core_h
        if cfg.freeze_h:
            g_new = prox_apply(
                pen.g, g_old - core_gradient(model, z, y, gamma) / rho_g, rho_g
            )
            h_new = h_old
        else:
            g_new, h_new = update_cores(
                model, z, y, gamma, rho_g, rho_h, pen.g, pen.h, cfg.tie_reducer
            )
        model.core_g, model.core_h = g_new, h_new
        z_new = update_z(
            model,
            z,
            y,
            gamma,
            family,
            mom,
            omega,
            z_solver=cfg.z_solver,
            z_floor=cfg.z_floor,
            qn_memory=cfg.qn_memory,
            qn_max_inner=cfg.qn_max_inner,
            qn_grad_tol=grad_tol,
        )
        y_new = update_dual(model, z_new, y, gamma)

        steps = (
            frob_norm(z_new - z),
            frob_norm(y_new - y),
            math.sqrt(factor_sq),
            frob_norm(g_new - g_old),
            frob_norm(h_new - h_old),
        )
        z, y = z_new, y_new
        state.z, state.y, state.iteration = z, y, k
        row = diagnostics(k, (model, z, y, gamma), steps, started)
        trace.append(row)
        started = time.perf_counter()

        if not math.isfinite(row.lagrangian) or row.lagrangian > guard:
            raise SolverAbort(
                f"augmented Lagrangian diverged at iteration {k}: "
                f"{row.lagrangian:.3e} (initial {initial_lagr:.3e})",
                trace,
            )
        block_step = math.sqrt(
            steps[0] ** 2 + steps[2] ** 2 + steps[3] ** 2 + steps[4] ** 2
        )
        if row.primal_residual <= tol_primal and block_step <= cfg.tol_step:
            converged = True
            reason = "tolerance"
            break

    log.info(
        "solve finished after %d iterations (%s); primal residual %.3e",
        trace.rows[-1].iteration,
        reason,
        trace.rows[-1].primal_residual,
    )
    effective = replace(cfg, rho_g=rho_g, rho_h=rho_h, rho_factors=tuple(rho_factors))
    return SolverResult(
        model=model, z=z, trace=trace, y=y, config=effective, converged=converged,
        reason=reason,
    )
