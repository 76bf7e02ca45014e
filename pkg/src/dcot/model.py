"""The double-core decomposition object: factors, shared core, subject core.

A :class:`DcotModel` represents ``(G + H) x_1 U_1 ... x_N U_N`` where ``G``
is a core shared by the whole dataset and ``H`` is a second core whose
slices are constrained equal within declared subject groups.  Groups tie
slices of the *core*, along one mode, optionally restricted to a fixed
index of a second mode (which covers patterns such as "tie slices
``h[m, :, k, :]`` over ``k`` separately for each ``m``").
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import matricize, multilinear_product, n_mode_product


@dataclass(frozen=True)
class SliceGroup:
    """A set of slice indices (along the partition's mode) tied equal.

    ``fixed`` optionally restricts the tie to one index of another mode,
    given as ``(mode, index)``.
    """

    indices: tuple[int, ...]
    fixed: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if not self.indices:
            raise ValueError("a slice group must be nonempty")
        if len(set(self.indices)) != len(self.indices):
            raise ValueError(f"duplicate indices in group {self.indices}")
        if self.fixed is not None:
            object.__setattr__(self, "fixed", (int(self.fixed[0]), int(self.fixed[1])))


@dataclass(frozen=True)
class SubjectPartition:
    """Disjoint groups of mode-``mode`` slices that must carry equal values."""

    mode: int
    groups: tuple[SliceGroup, ...]

    def __post_init__(self):
        groups = tuple(
            g if isinstance(g, SliceGroup) else SliceGroup(tuple(g))
            for g in self.groups
        )
        object.__setattr__(self, "groups", groups)
        if not groups:
            raise ValueError("partition needs at least one group")
        seen: set[tuple] = set()
        for g in groups:
            if g.fixed is not None and g.fixed[0] == self.mode:
                raise ValueError("fixed mode must differ from the tied mode")
            for i in g.indices:
                key = (g.fixed, i)
                if key in seen:
                    raise ValueError(
                        f"groups overlap at index {i} (fixed={g.fixed})"
                    )
                seen.add(key)
        # A plain group and a fixed-index group may not claim the same slice.
        plain = {i for g in groups if g.fixed is None for i in g.indices}
        for g in groups:
            if g.fixed is not None and plain.intersection(g.indices):
                raise ValueError("fixed-index groups overlap a plain group")

    def validate_shape(self, shape: tuple[int, ...]) -> None:
        """Check every index against the shape of the governed tensor."""
        if not 0 <= self.mode < len(shape):
            raise ValueError(f"partition mode {self.mode} out of range for {shape}")
        for g in self.groups:
            for i in g.indices:
                if not 0 <= i < shape[self.mode]:
                    raise ValueError(
                        f"group index {i} out of range for mode {self.mode} "
                        f"of size {shape[self.mode]}"
                    )
            if g.fixed is not None:
                fm, fi = g.fixed
                if not 0 <= fm < len(shape):
                    raise ValueError(f"fixed mode {fm} out of range for {shape}")
                if not 0 <= fi < shape[fm]:
                    raise ValueError(
                        f"fixed index {fi} out of range for mode {fm} "
                        f"of size {shape[fm]}"
                    )


@dataclass(frozen=True)
class InitStrategy:
    """How to initialize factor matrices: ``identity``, ``random`` or ``hosvd``."""

    kind: str = "hosvd"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("identity", "random", "hosvd"):
            raise ValueError(f"unknown init strategy {self.kind!r}")


@dataclass
class DcotModel:
    """Factor matrices plus the shared core ``core_g`` and tied core ``core_h``."""

    factors: list[np.ndarray]
    core_g: np.ndarray
    core_h: np.ndarray
    partition: SubjectPartition | None = None

    def __post_init__(self):
        self.factors = [np.asarray(u, dtype=float) for u in self.factors]
        self.core_g = np.asarray(self.core_g, dtype=float)
        self.core_h = np.asarray(self.core_h, dtype=float)
        if self.core_g.shape != self.core_h.shape:
            raise ValueError("core_g and core_h must share a shape")
        if len(self.factors) != self.core_g.ndim:
            raise ValueError("need one factor matrix per core mode")
        for n, u in enumerate(self.factors):
            if u.ndim != 2 or u.shape[1] != self.core_g.shape[n]:
                raise ValueError(
                    f"factor {n} must be I_{n} x {self.core_g.shape[n]}, "
                    f"got {u.shape}"
                )
        if self.partition is not None:
            self.partition.validate_shape(self.core_h.shape)
            if not tie_satisfied(self.core_h, self.partition):
                raise ValueError("core_h violates its partition tie constraint")

    @property
    def data_shape(self) -> tuple[int, ...]:
        return tuple(u.shape[0] for u in self.factors)

    @property
    def ranks(self) -> tuple[int, ...]:
        return self.core_g.shape

    def copy(self) -> "DcotModel":
        return DcotModel(
            [u.copy() for u in self.factors],
            self.core_g.copy(),
            self.core_h.copy(),
            self.partition,
        )


def reconstruct(model: DcotModel) -> np.ndarray:
    """Evaluate ``(core_g + core_h) x_1 U_1 ... x_N U_N``."""
    return multilinear_product(model.core_g + model.core_h, model.factors)


def init_factors(
    x: np.ndarray, ranks: list[int], strategy: InitStrategy
) -> list[np.ndarray]:
    """Build initial factor matrices for data tensor ``x``.

    ``identity`` requires every rank to match the mode size; ``random``
    draws seeded standard-normal entries; ``hosvd`` returns the leading
    left singular vectors of each matricization (orthonormal columns,
    computed from the symmetric eigendecomposition of the Gram matrix).
    """
    x = np.asarray(x, dtype=float)
    ranks = [int(r) for r in ranks]
    if len(ranks) != x.ndim:
        raise ValueError("need one rank per mode")
    for n, r in enumerate(ranks):
        if r < 1 or r > x.shape[n]:
            raise ValueError(
                f"rank {r} invalid for mode {n} of size {x.shape[n]}"
            )
    if strategy.kind == "identity":
        if ranks != list(x.shape):
            raise ValueError("identity init requires ranks equal to mode sizes")
        return [np.eye(s) for s in x.shape]
    if strategy.kind == "random":
        rng = np.random.default_rng(strategy.seed)
        return [rng.standard_normal((x.shape[n], ranks[n])) for n in range(x.ndim)]
    # hosvd
    factors = []
    for n in range(x.ndim):
        a = matricize(x, n)
        evals, evecs = np.linalg.eigh(a @ a.T)
        order = np.argsort(evals)[::-1][: ranks[n]]
        factors.append(np.ascontiguousarray(evecs[:, order]))
    return factors


def project_core(x: np.ndarray, factors: list[np.ndarray]) -> np.ndarray:
    """Project ``x`` onto the basis of the factor matrices: ``x x_n U_n^T``."""
    x = np.asarray(x, dtype=float)
    if len(factors) != x.ndim:
        raise ValueError("need one factor matrix per mode")
    out = x
    for n, u in enumerate(factors):
        out = n_mode_product(out, np.asarray(u, dtype=float).T, n)
    return out


def _group_slicer(ndim: int, mode: int, index: int, fixed: tuple[int, int] | None):
    sel: list = [slice(None)] * ndim
    sel[mode] = index
    if fixed is not None:
        sel[fixed[0]] = fixed[1]
    return tuple(sel)


def tie_satisfied(h: np.ndarray, partition: SubjectPartition) -> bool:
    """True when every group's slices are bitwise equal."""
    h = np.asarray(h)
    for g in partition.groups:
        first = h[_group_slicer(h.ndim, partition.mode, g.indices[0], g.fixed)]
        for i in g.indices[1:]:
            if not np.array_equal(
                h[_group_slicer(h.ndim, partition.mode, i, g.fixed)], first
            ):
                return False
    return True


def tie_heterogeneous_core(
    h: np.ndarray, partition: SubjectPartition, reducer: str = "mean"
) -> np.ndarray:
    """Force equality of slices within each group of the partition.

    ``reducer="mean"`` replaces each group's slices by their arithmetic
    mean; ``"representative"`` copies the first slice of the group.
    Slices outside every group are untouched.  Groups whose slices are
    already equal are left bitwise unchanged, which makes the operation
    idempotent.
    """
    if reducer not in ("mean", "representative"):
        raise ValueError(f"unknown reducer {reducer!r}")
    h = np.asarray(h, dtype=float)
    partition.validate_shape(h.shape)
    out = h.copy()
    for g in partition.groups:
        slicers = [
            _group_slicer(h.ndim, partition.mode, i, g.fixed) for i in g.indices
        ]
        first = out[slicers[0]]
        if all(np.array_equal(out[s], first) for s in slicers[1:]):
            continue
        if reducer == "representative":
            value = first.copy()
        else:
            value = sum(out[s] for s in slicers) / len(slicers)
        for s in slicers:
            out[s] = value
    return out


def initial_model(
    x: np.ndarray,
    ranks: list[int],
    strategy: InitStrategy,
    partition: SubjectPartition | None = None,
    reducer: str = "mean",
) -> DcotModel:
    """Factor init plus core init: both cores start from the projection of ``x``.

    The subject core additionally has its tie constraint enforced so the
    returned model is valid.
    """
    factors = init_factors(x, ranks, strategy)
    g = project_core(x, factors)
    h = g.copy()
    if partition is not None:
        h = tie_heterogeneous_core(h, partition, reducer)
    return DcotModel(factors, g, h, partition)
