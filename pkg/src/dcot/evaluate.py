"""Metrics, hold-out splitting, penalty-weight search, synthetic data.

The synthetic generator plants a double-core model with clustered factor
rows (the cluster ids double as "true" labels for the similarity model
and the factor rows as per-mode features), draws noisy observations from
the requested family, and masks a fraction of cells uniformly at random.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .losses import LossFamily, ObservationSet
from .model import DcotModel, InitStrategy, SubjectPartition, initial_model, reconstruct
from .similarity import SimilarityModel, mode_similarity
from .solver import SolverConfig, solve

log = logging.getLogger("dcot.evaluate")


def rmse(z_hat: np.ndarray, reference: ObservationSet) -> float:
    """Root mean square error over the reference entries only."""
    if len(reference) == 0:
        raise ValueError("reference set is empty")
    z_hat = np.asarray(z_hat, dtype=float)
    if z_hat.shape != reference.shape:
        raise ValueError(
            f"estimate shape {z_hat.shape} does not match reference shape "
            f"{reference.shape}"
        )
    pred = z_hat[tuple(reference.indices.T)]
    return math.sqrt(float(np.mean((pred - reference.values) ** 2)))


@dataclass(frozen=True)
class SplitSpec:
    """Seeded train/test split of an observation set."""

    train_fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie strictly in (0, 1)")


def holdout_split(
    omega: ObservationSet, spec: SplitSpec
) -> tuple[ObservationSet, ObservationSet]:
    """Disjoint, exhaustive, seed-deterministic split of the observations."""
    n = len(omega)
    if n < 2:
        raise ValueError("need at least two observations to split")
    k = int(round(spec.train_fraction * n))
    k = min(max(k, 1), n - 1)
    perm = np.random.default_rng(spec.seed).permutation(n)
    train_idx, test_idx = np.sort(perm[:k]), np.sort(perm[k:])
    train = ObservationSet(omega.indices[train_idx], omega.values[train_idx], omega.shape)
    test = ObservationSet(omega.indices[test_idx], omega.values[test_idx], omega.shape)
    return train, test


def complement_set(omega: ObservationSet, truth: ObservationSet) -> ObservationSet:
    """Entries of ``truth`` whose indices are *not* observed in ``omega``."""
    observed = omega.mask()
    keep = ~observed[tuple(truth.indices.T)]
    if not keep.any():
        raise ValueError("every truth entry is observed; nothing held out")
    return ObservationSet(truth.indices[keep], truth.values[keep], truth.shape)


def lambda_grid() -> np.ndarray:
    """The 61-point logarithmic weight grid ``10**((nu - 31) / 10)``."""
    nu = np.arange(1, 62)
    return 10.0 ** ((nu - 31) / 10.0)


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a planted heterogeneous factorization problem."""

    shape: tuple[int, ...]
    ranks: tuple[int, ...]
    partition: SubjectPartition | None = None
    subject_core_scale: float = 1.0
    noise_family: str = "gaussian"
    noise_sigma: float = 0.0
    missing_fraction: float = 0.0
    seed: int = 0
    label_clusters: int = 4
    feature_jitter: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        if len(self.shape) != len(self.ranks):
            raise ValueError("need one rank per mode")
        if any(r < 1 or r > s for r, s in zip(self.ranks, self.shape)):
            raise ValueError("ranks must satisfy 1 <= rank <= mode size")
        if not 0.0 <= self.missing_fraction < 1.0:
            raise ValueError("missing_fraction must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.partition is not None:
            self.partition.validate_shape(self.ranks)


class SynthData(NamedTuple):
    observed: ObservationSet
    ground_truth: ObservationSet
    planted: DcotModel
    sim: SimilarityModel
    labels: list[np.ndarray]


def _clustered_factor(rng, size, rank, clusters, jitter, orthonormal):
    labels = np.sort(rng.integers(0, clusters, size=size)) if clusters > 1 else np.zeros(size, dtype=int)
    centroids = rng.standard_normal((clusters, rank))
    rows = centroids[labels] + jitter * rng.standard_normal((size, rank))
    if orthonormal:
        q, r = np.linalg.qr(rows)
        # Fix the sign ambiguity for determinism across BLAS builds.
        signs = np.sign(np.diag(r))
        signs[signs == 0] = 1.0
        return q * signs, labels
    rows = np.abs(rows)
    rows /= np.linalg.norm(rows, axis=0, keepdims=True)
    return rows, labels


def synthesize(spec: SynthSpec) -> SynthData:
    """Plant a model, draw observations, and build the matching similarity.

    The ground truth is the full reconstruction of the planted model (so
    ``reconstruct(planted)`` equals the truth bitwise).  The gaussian and
    bernoulli families use random orthonormal factors; the positive
    families (poisson, gamma) use nonnegative column-normalized factors
    and nonnegative cores so the natural parameter stays in domain.
    """
    rng = np.random.default_rng(spec.seed)
    positive = spec.noise_family in ("poisson", "gamma")
    factors, labels = [], []
    for n, size in enumerate(spec.shape):
        clusters = min(spec.label_clusters, size)
        u, lab = _clustered_factor(
            rng, size, spec.ranks[n], clusters, spec.feature_jitter, not positive
        )
        factors.append(u)
        labels.append(lab)
    core_g = rng.standard_normal(spec.ranks)
    core_h = rng.standard_normal(spec.ranks)
    if positive:
        core_g, core_h = np.abs(core_g), np.abs(core_h)
    from .model import tie_heterogeneous_core

    if spec.partition is not None:
        core_h = tie_heterogeneous_core(core_h, spec.partition, "mean")
    h_norm = float(np.linalg.norm(core_h))
    g_norm = float(np.linalg.norm(core_g))
    if h_norm > 0:
        core_h = core_h * (spec.subject_core_scale * g_norm / h_norm)
    planted = DcotModel(factors, core_g, core_h, spec.partition)
    z_star = reconstruct(planted)

    truth = ObservationSet.from_dense(z_star)
    total = int(np.prod(spec.shape))
    n_missing = int(round(spec.missing_fraction * total))
    flat = rng.permutation(total)
    kept = np.sort(flat[: total - n_missing])
    mask = np.zeros(total, dtype=bool)
    mask[kept] = True
    mask = mask.reshape(spec.shape)

    mean = z_star[mask]
    if spec.noise_family == "gaussian":
        values = mean + spec.noise_sigma * rng.standard_normal(mean.shape)
    elif spec.noise_family == "bernoulli":
        values = rng.binomial(1, 1.0 / (1.0 + np.exp(-mean))).astype(float)
    elif spec.noise_family == "poisson":
        values = rng.poisson(mean).astype(float)
    elif spec.noise_family == "gamma":
        values = rng.gamma(shape=1.0, scale=np.maximum(mean, 1e-6))
    else:
        raise ValueError(f"unknown noise family {spec.noise_family!r}")
    observed = ObservationSet(np.argwhere(mask), values, spec.shape)

    per_mode = [
        mode_similarity(factors[n], labels=labels[n]) for n in range(len(spec.shape))
    ]
    sim = SimilarityModel(per_mode=per_mode)
    return SynthData(observed, truth, planted, sim, labels)


@dataclass(frozen=True)
class GridPoint:
    weights: dict
    validation_rmse: float
    converged: bool


@dataclass(frozen=True)
class GridSearchResult:
    best: GridPoint
    report: tuple[GridPoint, ...]


def _with_weights(config: SolverConfig, weights: dict) -> SolverConfig:
    pen = config.penalties
    new_g = replace(pen.g, weight=weights.get("g", pen.g.weight))
    new_h = replace(pen.h, weight=weights.get("h", pen.h.weight))
    if isinstance(pen.factors, tuple):
        new_f = tuple(
            replace(p, weight=weights.get("factors", p.weight)) for p in pen.factors
        )
    else:
        new_f = replace(pen.factors, weight=weights.get("factors", pen.factors.weight))
    return replace(config, penalties=replace(pen, g=new_g, h=new_h, factors=new_f))


def _grid_eval(args):
    from .solver import InnerSolveError, SolverAbort

    weights, train, test, family, sim, config, ranks, strategy, partition = args
    cfg = _with_weights(config, weights)
    init = initial_model(train.to_dense(float(train.values.mean())), ranks, strategy,
                         partition, cfg.tie_reducer)
    try:
        result = solve(train, init, family, sim, cfg)
    except (SolverAbort, InnerSolveError) as exc:
        log.warning("grid point %s failed: %s", weights, exc)
        return GridPoint(weights=weights, validation_rmse=math.inf, converged=False)
    return GridPoint(
        weights=weights,
        validation_rmse=rmse(reconstruct(result.model), test),
        converged=result.converged,
    )


def grid_search(
    omega: ObservationSet,
    split: SplitSpec,
    family: LossFamily,
    sim: SimilarityModel,
    config: SolverConfig,
    ranks,
    strategy: InitStrategy = InitStrategy("hosvd"),
    partition: SubjectPartition | None = None,
    lambdas: np.ndarray | None = None,
    blocks: tuple[str, ...] = ("g", "h", "factors"),
    per_block: bool = False,
    workers: int = 1,
) -> GridSearchResult:
    """Pick penalty weights by validation RMSE on a hold-out split.

    By default one shared weight is swept over ``lambdas`` (the 61-point
    grid when omitted) and applied to every block named in ``blocks``;
    ``per_block`` sweeps the full Cartesian product of per-block weights
    instead (use a small grid).  Ties in validation RMSE go to the larger
    (more regularized) candidate.
    """
    lambdas = lambda_grid() if lambdas is None else np.asarray(lambdas, dtype=float)
    if lambdas.size == 0:
        raise ValueError("weight grid is empty")
    lambdas = np.sort(lambdas)
    train, test = holdout_split(omega, split)
    if per_block:
        candidates = [
            dict(zip(blocks, combo))
            for combo in np.stack(
                np.meshgrid(*([lambdas] * len(blocks)), indexing="ij"), axis=-1
            ).reshape(-1, len(blocks))
        ]
    else:
        candidates = [{b: float(lam) for b in blocks} for lam in lambdas]
    ranks = tuple(int(r) for r in ranks)
    jobs = [
        (weights, train, test, family, sim, config, ranks, strategy, partition)
        for weights in candidates
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(_grid_eval, jobs))
    else:
        points = [_grid_eval(job) for job in jobs]
    if all(math.isinf(p.validation_rmse) for p in points):
        raise RuntimeError("all grid evaluations failed")
    best = points[0]
    for p in points[1:]:
        if p.validation_rmse <= best.validation_rmse:
            best = p
    log.info("grid search selected %s (rmse %.4g)", best.weights, best.validation_rmse)
    return GridSearchResult(best=best, report=tuple(points))
