"""Dense N-way tensor algebra: matricization, mode products, Kronecker products.

Conventions used throughout the package:

* Tensors are ``numpy.ndarray`` objects holding ``float64`` values.  The
  logical linearization order of a tensor (``vec``) is first-mode-fastest,
  i.e. Fortran order over the mode tuple ``(I_1, ..., I_N)``.
* ``matricize(t, mode)`` sends entry ``(i_1, ..., i_N)`` to row ``i_mode``
  and column ``sum_{k != mode} i_k * prod_{m < k, m != mode} I_m``
  (0-based): the remaining modes are enumerated first-remaining-mode
  fastest.  ``fold`` is the exact inverse under the same convention.
* Modes are 0-based everywhere in the Python API; 1-based indices appear
  only in on-disk file formats (see :mod:`dcot.io`).

All functions are pure: they never mutate their arguments, so concurrent
use is safe.  Floating-point results depend on summation order only through
ordinary rounding.
"""

from __future__ import annotations

import math

import numpy as np

# Refuse to build matrices that cannot plausibly fit in memory.
_MAX_ELEMENTS = 2**33


def _check_mode(mode: int, ndim: int) -> None:
    if not 0 <= mode < ndim:
        raise ValueError(f"mode {mode} out of range for a {ndim}-way tensor")


def vec(t: np.ndarray) -> np.ndarray:
    """Vectorize a tensor in first-mode-fastest (Fortran) order."""
    return np.asarray(t, dtype=float).ravel(order="F")


def matricize(t: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization of a dense tensor.

    The result has ``t.shape[mode]`` rows and ``prod(other dims)`` columns,
    with columns ordered first-remaining-mode fastest (see module docstring).
    """
    t = np.asarray(t, dtype=float)
    _check_mode(mode, t.ndim)
    return np.moveaxis(t, mode, 0).reshape((t.shape[mode], -1), order="F")


def fold(m: np.ndarray, mode: int, shape: tuple[int, ...]) -> np.ndarray:
    """Inverse of :func:`matricize` for the target ``shape``."""
    m = np.asarray(m, dtype=float)
    shape = tuple(int(s) for s in shape)
    _check_mode(mode, len(shape))
    rest = [shape[k] for k in range(len(shape)) if k != mode]
    expected = (shape[mode], math.prod(rest) if rest else 1)
    if m.shape != expected:
        raise ValueError(
            f"cannot fold a {m.shape} matrix into shape {shape} along mode "
            f"{mode}; expected a {expected} matrix"
        )
    return np.moveaxis(m.reshape([shape[mode]] + rest, order="F"), 0, mode)


def n_mode_product(t: np.ndarray, u: np.ndarray, mode: int) -> np.ndarray:
    """Multiply tensor ``t`` by matrix ``u`` along ``mode``.

    Satisfies ``matricize(result, mode) == u @ matricize(t, mode)``; the
    result's shape replaces ``t.shape[mode]`` by ``u.shape[0]``.
    """
    t = np.asarray(t, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_mode(mode, t.ndim)
    if u.ndim != 2:
        raise ValueError("mode product expects a matrix")
    if u.shape[1] != t.shape[mode]:
        raise ValueError(
            f"matrix with {u.shape[1]} columns cannot act on mode {mode} "
            f"of size {t.shape[mode]}"
        )
    new_shape = t.shape[:mode] + (u.shape[0],) + t.shape[mode + 1 :]
    return fold(u @ matricize(t, mode), mode, new_shape)


def multilinear_product(core: np.ndarray, factors: list[np.ndarray]) -> np.ndarray:
    """Apply one factor matrix per mode: ``core x_1 U_1 x_2 U_2 ...``.

    The result does not depend on the order in which modes are applied
    (up to floating rounding).
    """
    core = np.asarray(core, dtype=float)
    if len(factors) != core.ndim:
        raise ValueError(
            f"expected {core.ndim} factor matrices, got {len(factors)}"
        )
    out = core
    for mode, u in enumerate(factors):
        out = n_mode_product(out, u, mode)
    return out


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product with ``c[i1*J1+j1, i2*J2+j2] = a[i1,i2] * b[j1,j2]``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("kron expects two matrices")
    rows = a.shape[0] * b.shape[0]
    cols = a.shape[1] * b.shape[1]
    if rows * cols > _MAX_ELEMENTS:
        raise ValueError(f"kron result {rows}x{cols} is too large")
    return np.kron(a, b)


def kron_all(matrices: list[np.ndarray]) -> np.ndarray:
    """Kronecker product of a list of matrices, left to right."""
    if not matrices:
        raise ValueError("kron_all needs at least one matrix")
    out = np.asarray(matrices[0], dtype=float)
    for m in matrices[1:]:
        out = kron(out, m)
    return out


def frob_inner(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius inner product of two same-shape tensors."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a.ravel(), b.ravel()))


def frob_norm(a: np.ndarray) -> float:
    """Frobenius norm, defined as ``sqrt(frob_inner(a, a))``."""
    return math.sqrt(frob_inner(a, a))
