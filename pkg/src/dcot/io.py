"""On-disk formats: COO text, dense binary tensors, features, partitions.

All file formats use 1-based indices; conversion to the package's
0-based convention happens here and only here.

* COO text: a header line ``# dims: I_1 I_2 ... I_N`` followed by one
  ``i_1 i_2 ... i_N value`` line per observed entry (whitespace
  separated).  Blank lines and extra ``#`` comment lines are ignored.
  Written files sort entries lexicographically by index.
* Dense binary (``.dct``): magic ``DCOT``, little-endian u32 version (1),
  u32 mode count, one u64 per mode size, then float64 entries in
  first-mode-fastest order.
* Feature files: one whitespace-separated float row per index.
* Label files: one integer cluster id per line.
* Partition files: ``mode = <m>``, optional ``fixed-mode = <m>``, then
  one ``group: [i, j, ...]`` line per group, with an optional ``@ <f>``
  suffix naming the fixed index when ``fixed-mode`` is set.  The compact
  one-line form ``mode=<m>: [..], [..]`` is also accepted.
"""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

from .losses import ObservationSet
from .model import SliceGroup, SubjectPartition

_MAGIC = b"DCOT"
_VERSION = 1


class DataIOError(Exception):
    """A data file could not be read, parsed, or written."""


class ConfigError(Exception):
    """A run configuration is malformed."""


def read_coo(path) -> ObservationSet:
    """Parse a COO text file into an observation set (strict validation)."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    dims = None
    entries: list[tuple[tuple[int, ...], float]] = []
    seen: dict[tuple[int, ...], int] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            m = re.match(r"#\s*dims\s*:\s*(.*)$", line)
            if m:
                if dims is not None:
                    raise DataIOError(f"{path}:{lineno}: duplicate dims header")
                try:
                    dims = tuple(int(tok) for tok in m.group(1).split())
                except ValueError as exc:
                    raise DataIOError(f"{path}:{lineno}: bad dims header") from exc
                if not dims or any(d < 1 for d in dims):
                    raise DataIOError(f"{path}:{lineno}: dims must be positive")
            continue
        if dims is None:
            raise DataIOError(f"{path}:{lineno}: entry before '# dims:' header")
        tokens = line.split()
        if len(tokens) != len(dims) + 1:
            raise DataIOError(
                f"{path}:{lineno}: expected {len(dims)} indices and a value, "
                f"got {len(tokens)} fields"
            )
        try:
            idx = tuple(int(tok) for tok in tokens[:-1])
            value = float(tokens[-1])
        except ValueError as exc:
            raise DataIOError(f"{path}:{lineno}: unparseable entry") from exc
        if any(not 1 <= i <= d for i, d in zip(idx, dims)):
            raise DataIOError(f"{path}:{lineno}: index {idx} out of range for {dims}")
        if idx in seen:
            raise DataIOError(
                f"{path}:{lineno}: duplicate index {idx} (first seen on line "
                f"{seen[idx]})"
            )
        seen[idx] = lineno
        entries.append((tuple(i - 1 for i in idx), value))
    if dims is None:
        raise DataIOError(f"{path}: missing '# dims:' header")
    return ObservationSet.from_entries(entries, dims)


def write_coo(omega: ObservationSet, path) -> None:
    """Emit a COO text file; entries sorted lexicographically by index."""
    path = Path(path)
    order = np.lexsort(tuple(omega.indices[:, k] for k in reversed(range(omega.indices.shape[1]))))
    lines = ["# dims: " + " ".join(str(d) for d in omega.shape)]
    for row in order:
        idx = omega.indices[row]
        lines.append(
            " ".join(str(int(i) + 1) for i in idx) + " " + repr(float(omega.values[row]))
        )
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def read_dense(path) -> np.ndarray:
    """Read a dense binary tensor file."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    if blob[:4] != _MAGIC:
        raise DataIOError(f"{path}: bad magic bytes (offset 0)")
    if len(blob) < 12:
        raise DataIOError(f"{path}: truncated header")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise DataIOError(f"{path}: unsupported version {version}")
    header_end = 12 + 8 * n
    if len(blob) < header_end:
        raise DataIOError(f"{path}: truncated dims block (offset 12)")
    dims = struct.unpack_from(f"<{n}Q", blob, 12)
    count = int(np.prod(dims)) if dims else 0
    expected = header_end + 8 * count
    if len(blob) != expected:
        raise DataIOError(
            f"{path}: payload is {len(blob) - header_end} bytes, expected "
            f"{8 * count} (offset {header_end})"
        )
    data = np.frombuffer(blob, dtype="<f8", offset=header_end, count=count)
    return data.reshape(dims, order="F").astype(float)


def write_dense(t: np.ndarray, path) -> None:
    """Write a dense binary tensor file."""
    t = np.asarray(t, dtype=float)
    path = Path(path)
    header = _MAGIC + struct.pack("<II", _VERSION, t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    try:
        path.write_bytes(header + t.ravel(order="F").astype("<f8").tobytes())
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def read_tensor(path, format: str):
    """Dispatch on ``format``: ``coo`` -> ObservationSet, ``dense`` -> ndarray."""
    if format == "coo":
        return read_coo(path)
    if format == "dense":
        return read_dense(path)
    raise ConfigError(f"unknown tensor format {format!r}")


def write_tensor(obj, path, format: str) -> None:
    """Inverse of :func:`read_tensor`."""
    if format == "coo":
        if not isinstance(obj, ObservationSet):
            raise ConfigError("coo format stores observation sets")
        write_coo(obj, path)
    elif format == "dense":
        write_dense(np.asarray(obj, dtype=float), path)
    else:
        raise ConfigError(f"unknown tensor format {format!r}")


def read_features(path) -> np.ndarray:
    """One float feature row per index."""
    path = Path(path)
    try:
        rows = [
            [float(tok) for tok in line.split()]
            for line in path.read_text(encoding="utf-8").splitlines()
            if line.strip() and not line.strip().startswith("#")
        ]
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise DataIOError(f"{path}: unparseable feature value") from exc
    if not rows or len({len(r) for r in rows}) != 1:
        raise DataIOError(f"{path}: feature rows must be nonempty and equal length")
    return np.array(rows, dtype=float)


def write_features(feats: np.ndarray, path) -> None:
    lines = [" ".join(repr(float(v)) for v in row) for row in np.atleast_2d(feats)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_labels(path) -> np.ndarray:
    """One integer cluster id per line."""
    path = Path(path)
    try:
        vals = [
            int(line.strip())
            for line in path.read_text(encoding="utf-8").splitlines()
            if line.strip() and not line.strip().startswith("#")
        ]
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise DataIOError(f"{path}: labels must be integers") from exc
    if not vals:
        raise DataIOError(f"{path}: empty label file")
    return np.array(vals, dtype=int)


def write_labels(labels: np.ndarray, path) -> None:
    Path(path).write_text(
        "\n".join(str(int(v)) for v in np.asarray(labels).ravel()) + "\n",
        encoding="utf-8",
    )


_GROUP_RE = re.compile(r"^group\s*:\s*\[([^\]]*)\]\s*(?:@\s*(\d+))?\s*$")
_INLINE_RE = re.compile(r"^mode\s*=\s*(\d+)\s*:\s*(.+)$")


def _parse_index_list(text: str, where: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok.strip()) for tok in text.split(",") if tok.strip())
    except ValueError as exc:
        raise DataIOError(f"{where}: bad index list [{text}]") from exc


def read_partition(path) -> SubjectPartition:
    """Parse a partition file (see module docstring for the grammar)."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    mode = None
    fixed_mode = None
    groups: list[SliceGroup] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{path}:{lineno}"
        inline = _INLINE_RE.match(line)
        if inline and "group" not in line:
            mode = int(inline.group(1)) - 1
            for chunk in re.findall(r"\[([^\]]*)\]", inline.group(2)):
                idx = _parse_index_list(chunk, where)
                groups.append(SliceGroup(tuple(i - 1 for i in idx)))
            continue
        m = re.match(r"^mode\s*=\s*(\d+)\s*$", line)
        if m:
            if mode is not None:
                raise DataIOError(f"{where}: duplicate mode line")
            mode = int(m.group(1)) - 1
            continue
        m = re.match(r"^fixed-mode\s*=\s*(\d+)\s*$", line)
        if m:
            fixed_mode = int(m.group(1)) - 1
            continue
        m = _GROUP_RE.match(line)
        if m:
            idx = tuple(i - 1 for i in _parse_index_list(m.group(1), where))
            fixed = None
            if m.group(2) is not None:
                if fixed_mode is None:
                    raise DataIOError(f"{where}: '@' qualifier without fixed-mode")
                fixed = (fixed_mode, int(m.group(2)) - 1)
            elif fixed_mode is not None:
                raise DataIOError(f"{where}: fixed-mode set but group lacks '@'")
            groups.append(SliceGroup(idx, fixed))
            continue
        raise DataIOError(f"{where}: unrecognized partition line {line!r}")
    if mode is None:
        raise DataIOError(f"{path}: missing 'mode =' line")
    if not groups:
        raise DataIOError(f"{path}: no groups declared")
    try:
        return SubjectPartition(mode, tuple(groups))
    except ValueError as exc:
        raise DataIOError(f"{path}: {exc}") from exc


def write_partition(partition: SubjectPartition, path) -> None:
    lines = [f"mode = {partition.mode + 1}"]
    fixed_modes = {g.fixed[0] for g in partition.groups if g.fixed is not None}
    if len(fixed_modes) > 1:
        raise DataIOError("partition files support a single fixed mode")
    if fixed_modes:
        lines.append(f"fixed-mode = {next(iter(fixed_modes)) + 1}")
    for g in partition.groups:
        idx = ", ".join(str(i + 1) for i in g.indices)
        if g.fixed is not None:
            lines.append(f"group: [{idx}] @ {g.fixed[1] + 1}")
        else:
            lines.append(f"group: [{idx}]")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config root must be an object")
    return cfg
