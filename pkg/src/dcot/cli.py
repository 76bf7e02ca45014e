"""Command line interface: synth, factorize, complete, evaluate, grid-search.

Every command takes ``--config PATH`` pointing at a JSON document; the
schema is validated (unknown keys rejected) before any output is
produced, and the summary written to each run directory echoes the full
effective configuration.  Exit codes: 0 success, 2 config error, 3
solver abort, 4 I/O error; failures also emit a one-line JSON error
object on stderr.  Set ``DCOT_LOG`` to a level name (e.g. ``info``) for
diagnostics.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .evaluate import (
    SplitSpec,
    SynthSpec,
    grid_search,
    lambda_grid,
    rmse,
    synthesize,
)
from .losses import LossFamily, ObservationSet
from .model import (
    DcotModel,
    InitStrategy,
    SliceGroup,
    SubjectPartition,
    initial_model,
    reconstruct,
)
from .prox import Penalty
from .similarity import ModeSimilarity, SimilarityModel, label_consistency, mode_similarity
from .solver import BlockPenalties, InnerSolveError, SolverAbort, SolverConfig, solve

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4

_MISSING = object()


def _expect_keys(d: dict, allowed, where: str) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise io.ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _typed(d: dict, key: str, types, where: str, default=_MISSING):
    if key not in d:
        if default is _MISSING:
            raise io.ConfigError(f"{where}: missing required key {key!r}")
        return default
    value = d[key]
    if types is not None and not isinstance(value, types):
        raise io.ConfigError(f"{where}.{key}: wrong type {type(value).__name__}")
    if isinstance(value, bool) and types is not None and bool not in (
        types if isinstance(types, tuple) else (types,)
    ):
        raise io.ConfigError(f"{where}.{key}: wrong type bool")
    return value


def _int_list(d, key, where, default=_MISSING):
    value = _typed(d, key, list, where, default)
    if value is default and default is not _MISSING:
        return value
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise io.ConfigError(f"{where}.{key}: expected a list of integers")
    return [int(v) for v in value]


def _parse_family(cfg, where="family") -> LossFamily:
    obj = cfg if cfg is not None else "gaussian"
    if isinstance(obj, str):
        return LossFamily(obj)
    if isinstance(obj, dict):
        _expect_keys(obj, ("kind", "epsilon"), where)
        return LossFamily(
            _typed(obj, "kind", str, where),
            float(_typed(obj, "epsilon", (int, float), where, 1e-6)),
        )
    raise io.ConfigError(f"{where}: expected a name or an object")


def _parse_partition(obj, base: Path, where="partition") -> SubjectPartition | None:
    if obj is None:
        return None
    if not isinstance(obj, dict):
        raise io.ConfigError(f"{where}: expected an object")
    if "path" in obj:
        _expect_keys(obj, ("path",), where)
        return io.read_partition(base / _typed(obj, "path", str, where))
    _expect_keys(obj, ("mode", "fixed_mode", "groups"), where)
    mode = _typed(obj, "mode", int, where) - 1
    fixed_mode = obj.get("fixed_mode")
    groups_cfg = _typed(obj, "groups", list, where)
    groups = []
    for gi, g in enumerate(groups_cfg):
        gw = f"{where}.groups[{gi}]"
        if isinstance(g, list):
            groups.append(SliceGroup(tuple(int(i) - 1 for i in g)))
        elif isinstance(g, dict):
            _expect_keys(g, ("indices", "fixed_index"), gw)
            if fixed_mode is None:
                raise io.ConfigError(f"{gw}: fixed_index requires fixed_mode")
            groups.append(
                SliceGroup(
                    tuple(int(i) - 1 for i in _int_list(g, "indices", gw)),
                    (int(fixed_mode) - 1, int(_typed(g, "fixed_index", int, gw)) - 1),
                )
            )
        else:
            raise io.ConfigError(f"{gw}: expected a list or an object")
    try:
        return SubjectPartition(mode, tuple(groups))
    except ValueError as exc:
        raise io.ConfigError(f"{where}: {exc}") from exc


def _parse_similarity(obj, shape, base: Path, where="similarity") -> SimilarityModel:
    if obj is None:
        return SimilarityModel.neutral(shape)
    if not isinstance(obj, dict):
        raise io.ConfigError(f"{where}: expected an object")
    kind = _typed(obj, "kind", str, where, "kernel")
    if kind in ("neutral", "ones"):
        _expect_keys(obj, ("kind", "cap", "normalized"), where)
        builder = SimilarityModel.neutral if kind == "neutral" else SimilarityModel.ones
        return builder(
            shape,
            normalized=bool(_typed(obj, "normalized", bool, where, True)),
            cap=int(_typed(obj, "cap", int, where, 32)),
        )
    if kind != "kernel":
        raise io.ConfigError(f"{where}.kind: expected neutral, ones or kernel")
    _expect_keys(
        obj,
        ("kind", "features", "labels", "kernel", "bandwidths", "xi", "cap",
         "normalized", "label_same", "label_diff"),
        where,
    )
    feats_cfg = _typed(obj, "features", list, where)
    labels_cfg = _typed(obj, "labels", list, where, [None] * len(shape))
    if len(feats_cfg) != len(shape) or len(labels_cfg) != len(shape):
        raise io.ConfigError(f"{where}: need one features/labels entry per mode")
    kernel = _typed(obj, "kernel", str, where, "gaussian")
    bandwidths = obj.get("bandwidths")
    xi = float(_typed(obj, "xi", (int, float), where, 0.3))
    same = float(_typed(obj, "label_same", (int, float), where, 0.8))
    diff = float(_typed(obj, "label_diff", (int, float), where, 0.2))
    per_mode = []
    for n, (fpath, lpath) in enumerate(zip(feats_cfg, labels_cfg)):
        labels = io.read_labels(base / lpath) if lpath is not None else None
        if labels is not None and labels.size != shape[n]:
            raise io.ConfigError(
                f"{where}.labels[{n}]: {labels.size} labels for mode of size {shape[n]}"
            )
        if fpath is None:
            s = np.eye(shape[n])
            c = (
                label_consistency(labels, same, diff)
                if labels is not None
                else np.ones((shape[n], shape[n]))
            )
            per_mode.append(ModeSimilarity(s=s, c=c))
            continue
        feats = io.read_features(base / fpath)
        if feats.shape[0] != shape[n]:
            raise io.ConfigError(
                f"{where}.features[{n}]: {feats.shape[0]} rows for mode of size "
                f"{shape[n]}"
            )
        per_mode.append(
            mode_similarity(
                feats, kernel=kernel, bandwidths=bandwidths, xi=xi,
                labels=labels, same=same, diff=diff,
            )
        )
    return SimilarityModel(
        per_mode=per_mode,
        neighbor_cap=int(_typed(obj, "cap", int, where, 32)),
        normalized=bool(_typed(obj, "normalized", bool, where, True)),
    )


def _partition_flat_groups(partition: SubjectPartition, shape) -> tuple:
    """One flat-index group per tied slice, in first-mode-fastest order."""
    groups = []
    for g in partition.groups:
        for i in g.indices:
            sel = np.zeros(shape, dtype=bool)
            slicer: list = [slice(None)] * len(shape)
            slicer[partition.mode] = i
            if g.fixed is not None:
                slicer[g.fixed[0]] = g.fixed[1]
            sel[tuple(slicer)] = True
            groups.append(np.flatnonzero(sel.ravel(order="F")))
    return tuple(groups)


def _parse_penalty(obj, ranks, partition, where) -> Penalty:
    if obj is None:
        return Penalty.none()
    if not isinstance(obj, dict):
        raise io.ConfigError(f"{where}: expected an object")
    _expect_keys(obj, ("kind", "weight", "mix", "groups"), where)
    kind = _typed(obj, "kind", str, where, "none")
    weight = float(_typed(obj, "weight", (int, float), where, 0.0))
    mix = float(_typed(obj, "mix", (int, float), where, 0.5))
    groups = ()
    if kind == "sparse_group_lasso":
        spec = obj.get("groups", "partition")
        if spec == "partition":
            if partition is None:
                raise io.ConfigError(f"{where}: groups 'partition' needs a partition")
            groups = _partition_flat_groups(partition, tuple(ranks))
        elif isinstance(spec, list):
            groups = tuple(np.asarray(g, dtype=np.int64) - 1 for g in spec)
        else:
            raise io.ConfigError(f"{where}.groups: expected 'partition' or lists")
    try:
        return Penalty(kind, weight, groups, mix)
    except ValueError as exc:
        raise io.ConfigError(f"{where}: {exc}") from exc


def _parse_penalties(obj, ranks, partition, where="penalties") -> BlockPenalties:
    if obj is None:
        return BlockPenalties()
    if not isinstance(obj, dict):
        raise io.ConfigError(f"{where}: expected an object")
    _expect_keys(obj, ("g", "h", "factors"), where)
    g = _parse_penalty(obj.get("g"), ranks, partition, f"{where}.g")
    h = _parse_penalty(obj.get("h"), ranks, partition, f"{where}.h")
    fobj = obj.get("factors")
    if isinstance(fobj, list):
        factors = tuple(
            _parse_penalty(fo, ranks, partition, f"{where}.factors[{i}]")
            for i, fo in enumerate(fobj)
        )
    else:
        factors = _parse_penalty(fobj, ranks, partition, f"{where}.factors")
    return BlockPenalties(g=g, h=h, factors=factors)


_SOLVER_KEYS = (
    "gamma", "rho_g", "rho_h", "rho_factors", "max_iters", "tol_primal",
    "tol_step", "lipschitz_safety", "fixed_moduli", "moduli_period", "z_solver",
    "qn_memory", "qn_max_inner", "qn_grad_tol", "z_floor", "tie_reducer",
    "dual_init", "freeze_h", "divergence_factor",
)


def _parse_solver(obj, penalties: BlockPenalties, where="solver") -> SolverConfig:
    if obj is None:
        return SolverConfig(penalties=penalties)
    if not isinstance(obj, dict):
        raise io.ConfigError(f"{where}: expected an object")
    _expect_keys(obj, _SOLVER_KEYS, where)
    kwargs = {}
    for key in _SOLVER_KEYS:
        if key not in obj:
            continue
        value = obj[key]
        if key == "rho_factors" and value is not None:
            value = tuple(float(v) for v in value)
        kwargs[key] = value
    try:
        return SolverConfig(penalties=penalties, **kwargs)
    except (TypeError, ValueError) as exc:
        raise io.ConfigError(f"{where}: {exc}") from exc


def _parse_init(obj, seed: int, where="init") -> InitStrategy:
    if obj is None:
        return InitStrategy("hosvd", seed)
    if not isinstance(obj, dict):
        raise io.ConfigError(f"{where}: expected an object")
    _expect_keys(obj, ("kind", "seed"), where)
    try:
        return InitStrategy(
            _typed(obj, "kind", str, where, "hosvd"),
            int(_typed(obj, "seed", int, where, seed)),
        )
    except ValueError as exc:
        raise io.ConfigError(f"{where}: {exc}") from exc


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    return str(obj)


def _write_summary(out_dir: Path, payload: dict) -> None:
    (out_dir / "summary.json").write_text(
        json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def _read_observations(data_cfg: dict, base: Path, default_format: str) -> ObservationSet:
    _expect_keys(data_cfg, ("observations", "format"), "data")
    path = base / _typed(data_cfg, "observations", str, "data")
    fmt = _typed(data_cfg, "format", str, "data", default_format)
    obj = io.read_tensor(path, fmt)
    if isinstance(obj, ObservationSet):
        return obj
    return ObservationSet.from_dense(obj)


_TOP_KEYS = {
    "synth": {"required": ("synth", "output"), "optional": ("seed",)},
    "factorize": {
        "required": ("data", "family", "ranks", "output"),
        "optional": ("partition", "similarity", "penalties", "solver", "init", "seed"),
    },
    "complete": {
        "required": ("data", "family", "ranks", "output"),
        "optional": ("partition", "similarity", "penalties", "solver", "init", "seed"),
    },
    "evaluate": {"required": ("evaluate",), "optional": ("output", "seed")},
    "grid-search": {
        "required": ("data", "family", "ranks", "output", "grid", "split"),
        "optional": ("partition", "similarity", "penalties", "solver", "init", "seed"),
    },
}


def _validate_top(cfg: dict, command: str) -> None:
    spec = _TOP_KEYS[command]
    _expect_keys(cfg, spec["required"] + spec["optional"], "config")
    for key in spec["required"]:
        if key not in cfg:
            raise io.ConfigError(f"config: command {command!r} requires key {key!r}")


def _cmd_synth(cfg: dict, out_dir: Path, seed: int, base: Path) -> dict:
    obj = _typed(cfg, "synth", dict, "config")
    _expect_keys(
        obj,
        ("shape", "ranks", "partition", "subject_core_scale", "noise_family",
         "noise_sigma", "missing_fraction", "seed", "label_clusters",
         "feature_jitter"),
        "synth",
    )
    partition = _parse_partition(obj.get("partition"), base, "synth.partition")
    try:
        spec = SynthSpec(
            shape=tuple(_int_list(obj, "shape", "synth")),
            ranks=tuple(_int_list(obj, "ranks", "synth")),
            partition=partition,
            subject_core_scale=float(
                _typed(obj, "subject_core_scale", (int, float), "synth", 1.0)
            ),
            noise_family=_typed(obj, "noise_family", str, "synth", "gaussian"),
            noise_sigma=float(_typed(obj, "noise_sigma", (int, float), "synth", 0.0)),
            missing_fraction=float(
                _typed(obj, "missing_fraction", (int, float), "synth", 0.0)
            ),
            seed=int(_typed(obj, "seed", int, "synth", seed)),
            label_clusters=int(_typed(obj, "label_clusters", int, "synth", 4)),
            feature_jitter=float(
                _typed(obj, "feature_jitter", (int, float), "synth", 0.3)
            ),
        )
    except ValueError as exc:
        raise io.ConfigError(f"synth: {exc}") from exc
    data = synthesize(spec)
    out_dir.mkdir(parents=True, exist_ok=True)
    io.write_coo(data.observed, out_dir / "observed.coo")
    io.write_dense(data.ground_truth.to_dense(), out_dir / "truth.dct")
    for n, u in enumerate(data.planted.factors, start=1):
        io.write_features(u, out_dir / f"features_mode{n}.txt")
        io.write_labels(data.labels[n - 1], out_dir / f"labels_mode{n}.txt")
    if spec.partition is not None:
        io.write_partition(spec.partition, out_dir / "partition.txt")
    summary = {
        "command": "synth",
        "effective_config": spec,
        "observed_entries": len(data.observed),
        "total_cells": int(np.prod(spec.shape)),
    }
    _write_summary(out_dir, summary)
    return summary


def _load_problem(cfg: dict, base: Path, seed: int, default_format: str):
    omega = _read_observations(_typed(cfg, "data", dict, "config"), base, default_format)
    family = _parse_family(cfg.get("family"))
    family.validate_observations(omega)
    ranks = _int_list(cfg, "ranks", "config")
    if len(ranks) != len(omega.shape):
        raise io.ConfigError("config.ranks: need one rank per tensor mode")
    partition = _parse_partition(cfg.get("partition"), base)
    if partition is not None:
        try:
            partition.validate_shape(tuple(ranks))
        except ValueError as exc:
            raise io.ConfigError(f"partition: {exc}") from exc
    sim = _parse_similarity(cfg.get("similarity"), omega.shape, base)
    penalties = _parse_penalties(cfg.get("penalties"), ranks, partition)
    solver_cfg = _parse_solver(cfg.get("solver"), penalties)
    strategy = _parse_init(cfg.get("init"), seed)
    return omega, family, ranks, partition, sim, solver_cfg, strategy


def _cmd_factorize(cfg: dict, out_dir: Path, seed: int, default_format: str,
                   write_zhat: bool, base: Path) -> dict:
    omega, family, ranks, partition, sim, solver_cfg, strategy = _load_problem(
        cfg, base, seed, default_format
    )
    fill = 0.0 if family.kind == "bernoulli" else float(omega.values.mean())
    init = initial_model(
        omega.to_dense(fill), ranks, strategy, partition, solver_cfg.tie_reducer
    )
    result = solve(omega, init, family, sim, solver_cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    io.write_dense(result.model.core_g, out_dir / "model_g.dct")
    io.write_dense(result.model.core_h, out_dir / "model_h.dct")
    for n, u in enumerate(result.model.factors, start=1):
        io.write_dense(u, out_dir / f"factor_{n}.dct")
    result.trace.write_csv(out_dir / "trace.csv")
    z_hat = reconstruct(result.model)
    if write_zhat:
        io.write_dense(z_hat, out_dir / "z_hat.dct")
    summary = {
        "command": "complete" if write_zhat else "factorize",
        "effective_config": {
            "family": family,
            "ranks": list(ranks),
            "partition": partition,
            "solver": result.config,
            "init": strategy,
            "seed": seed,
            "similarity": {
                "neighbor_cap": sim.neighbor_cap,
                "normalized": sim.normalized,
            },
        },
        "iterations": result.trace.rows[-1].iteration,
        "converged": result.converged,
        "reason": result.reason,
        "primal_residual": result.trace.rows[-1].primal_residual,
        "train_rmse": rmse(z_hat, omega),
    }
    _write_summary(out_dir, summary)
    return summary


def _cmd_evaluate(cfg: dict, out_dir: Path | None, base: Path) -> dict:
    obj = _typed(cfg, "evaluate", dict, "config")
    _expect_keys(obj, ("estimate", "run_dir", "reference"), "evaluate")
    ref_path = _typed(obj, "reference", str, "evaluate")
    reference = io.read_coo(base / ref_path)
    if "estimate" in obj:
        z_hat = io.read_dense(base / _typed(obj, "estimate", str, "evaluate"))
    elif "run_dir" in obj:
        run = base / _typed(obj, "run_dir", str, "evaluate")
        core_g = io.read_dense(run / "model_g.dct")
        core_h = io.read_dense(run / "model_h.dct")
        factors = [
            io.read_dense(run / f"factor_{n}.dct") for n in range(1, core_g.ndim + 1)
        ]
        z_hat = reconstruct(DcotModel(factors, core_g, core_h))
    else:
        raise io.ConfigError("evaluate: need 'estimate' or 'run_dir'")
    value = rmse(z_hat, reference)
    summary = {"command": "evaluate", "rmse": value, "entries": len(reference)}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_summary(out_dir, summary)
    print(json.dumps(_jsonable(summary)))
    return summary


def _cmd_grid(cfg: dict, out_dir: Path, seed: int, default_format: str,
              workers: int, base: Path) -> dict:
    omega, family, ranks, partition, sim, solver_cfg, strategy = _load_problem(
        cfg, base, seed, default_format
    )
    split_obj = _typed(cfg, "split", dict, "config")
    _expect_keys(split_obj, ("train_fraction", "seed"), "split")
    try:
        split = SplitSpec(
            float(_typed(split_obj, "train_fraction", (int, float), "split")),
            int(_typed(split_obj, "seed", int, "split", seed)),
        )
    except ValueError as exc:
        raise io.ConfigError(f"split: {exc}") from exc
    grid_obj = _typed(cfg, "grid", dict, "config")
    _expect_keys(grid_obj, ("lambdas", "blocks", "per_block"), "grid")
    lam = grid_obj.get("lambdas", "default")
    lambdas = lambda_grid() if lam == "default" else np.asarray(lam, dtype=float)
    blocks = tuple(_typed(grid_obj, "blocks", list, "grid", ["g", "h"]))
    per_block = bool(_typed(grid_obj, "per_block", bool, "grid", False))
    result = grid_search(
        omega, split, family, sim, solver_cfg, ranks, strategy, partition,
        lambdas=lambdas, blocks=blocks, per_block=per_block, workers=workers,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [",".join(list(blocks) + ["validation_rmse", "converged"])]
    for p in result.report:
        lines.append(
            ",".join(
                [repr(float(p.weights[b])) for b in blocks]
                + [repr(float(p.validation_rmse)), str(p.converged).lower()]
            )
        )
    (out_dir / "grid_report.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    summary = {
        "command": "grid-search",
        "best_weights": result.best.weights,
        "best_validation_rmse": result.best.validation_rmse,
        "points": len(result.report),
        "effective_config": {
            "family": family,
            "ranks": list(ranks),
            "solver": solver_cfg,
            "split": split,
            "blocks": list(blocks),
            "per_block": per_block,
            "seed": seed,
        },
    }
    _write_summary(out_dir, summary)
    return summary


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dcot",
        description="Double-core tensor factorization and completion",
    )
    parser.add_argument(
        "command",
        choices=("synth", "factorize", "complete", "evaluate", "grid-search"),
    )
    parser.add_argument("--config", required=True, help="path to a JSON run config")
    parser.add_argument("--output", default=None, help="output directory override")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker pool size for grid-search")
    parser.add_argument("--seed", type=int, default=None, help="seed override")
    parser.add_argument("--format", choices=("coo", "dense"), default="coo",
                        help="default tensor format for data files")
    args = parser.parse_args(argv)

    level = os.environ.get("DCOT_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))

    try:
        cfg = io.load_json(args.config)
        _validate_top(cfg, args.command)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        out = args.output if args.output is not None else cfg.get("output")
        if args.command != "evaluate" and out is None:
            raise io.ConfigError("config: missing output directory")
        out_dir = Path(out) if out is not None else None

        base = Path(args.config).resolve().parent
        if args.command == "synth":
            _cmd_synth(cfg, out_dir, seed, base)
        elif args.command == "factorize":
            _cmd_factorize(cfg, out_dir, seed, args.format, False, base)
        elif args.command == "complete":
            _cmd_factorize(cfg, out_dir, seed, args.format, True, base)
        elif args.command == "evaluate":
            _cmd_evaluate(cfg, out_dir, base)
        else:
            _cmd_grid(cfg, out_dir, seed, args.format, max(1, args.threads), base)
        return EXIT_OK
    except io.ConfigError as exc:
        _emit_error("config", str(exc), EXIT_CONFIG)
        return EXIT_CONFIG
    except (SolverAbort, InnerSolveError) as exc:
        _emit_error("solver", str(exc), EXIT_SOLVER)
        return EXIT_SOLVER
    except io.DataIOError as exc:
        _emit_error("io", str(exc), EXIT_IO)
        return EXIT_IO
    except OSError as exc:
        _emit_error("io", str(exc), EXIT_IO)
        return EXIT_IO
    except ValueError as exc:
        _emit_error("config", str(exc), EXIT_CONFIG)
        return EXIT_CONFIG


def _emit_error(kind: str, message: str, code: int) -> None:
    sys.stderr.write(json.dumps({"error": {"kind": kind, "code": code,
                                           "message": message}}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
