"""Config-driven experiment pipeline and report/table emitters.

A config is one JSON document (``"version": 1``)::

    {
      "version": 1,
      "seed": 0,
      "data": {"kind": "blobs", "n_classes": 20, "samples_per_class": 50,
               "dims": 64, "cluster_std": 1.0, "separation": 10.0},
      "split": {"rule": "first-half"},
      "fractions": [1.0],
      "evaluation": {"kmeans_runs": 100, "ks": [1, 2, 4, 8]},
      "methods": [
        {"name": "PCA + L2", "trainer": "precomputed", "reduction": "pca",
         "dims": [64], "normalization": "l2", "distance": "euclidean"}
      ]
    }

``data`` may instead be ``{"kind": "files", "features": ..., "labels": ...}``
(split by ``split``) or ``{"kind": "files", "train": {...}, "test": {...}}``
for a split supplied up front. Relative paths resolve against the config
file's directory.

Each method runs, for every (dims, fraction) cell:
subsample train -> train (optional) -> extract eval-mode features ->
fit reduction on train -> apply to test -> normalize -> k-means / NMI with
k = number of test classes -> Recall@K.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .clustering import NMI_VARIANTS, clustering_eval
from .dataio import (
    LabeledDataset,
    SplitSpec,
    class_disjoint_split,
    load_dataset,
    load_features,
    subsample_per_class,
)
from .errors import ConfigError
from .metrics import InvariantShiftMetric, invariant_shift_basis
from .retrieval import recall_at_k
from .training import (
    ContrastiveModel,
    SoftmaxModel,
    TrainConfig,
    extract_features,
    init_contrastive,
    init_model,
    load_checkpoint,
    make_blobs,
    train,
)
from .transforms import (
    apply_projection,
    fit_pca,
    fit_random_projection,
    identity_projection,
    l2_normalize,
)

CONFIG_VERSION = 1
TRAINERS = ("precomputed", "softmax", "contrastive")
REDUCTIONS = ("pca", "random", "identity")
NORMALIZATIONS = ("none", "l2")
DISTANCES = ("euclidean", "cosine", "invariant-shift")
ORDERS = ("reduce-then-normalize", "normalize-then-reduce")
SCALING_FRACTIONS = (0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0)
# report keys whose values depend on the clock
TIMING_KEYS = ("wall_clock_seconds",)


def _req(obj: dict, key: str, path: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    if key not in obj:
        raise ConfigError(f"{path}.{key}: required field missing")
    return obj[key]


def _choice(value, options, path):
    if value not in options:
        raise ConfigError(f"{path}: {value!r} is not one of {list(options)}")
    return value


def _int(value, path, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}, got {value}")
    return value


def _bool(value, path):
    if not isinstance(value, bool):
        raise ConfigError(f"{path}: expected true or false, got {value!r}")
    return value


def _num(value, path):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    return float(value)


@dataclass
class MethodConfig:
    name: str
    trainer: str = "precomputed"
    variant: str = "plain"
    reduction: str = "identity"
    dims: list[int] = field(default_factory=list)
    normalization: str = "l2"
    distance: str = "euclidean"
    order: str = "reduce-then-normalize"
    margin: float = 1.0
    dropout_rate: float = 0.5
    train: TrainConfig = field(default_factory=TrainConfig)
    invariant: dict | None = None
    raw: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    seed: int
    data: dict
    split: SplitSpec
    fractions: list[float]
    methods: list[MethodConfig]
    kmeans_runs: int = 100
    ks: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    nmi_variant: str = "arithmetic"
    kmeans_max_iters: int = 300
    kmeans_tolerance: float = 1e-6
    kmeans_transfer_refinement: bool = True
    base_dir: Path = field(default_factory=Path.cwd)
    raw: dict = field(default_factory=dict)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p


_TRAIN_FIELDS = {f: t for f, t in (
    ("learning_rate", "num"), ("momentum", "num"), ("batch_size", "int"), ("epochs", "int"),
    ("lr_multiplier_new_layers", "num"), ("weight_decay", "num"),
)}


def _parse_train(obj, path, seed) -> TrainConfig:
    obj = obj or {}
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    kwargs = {}
    for key, value in obj.items():
        if key == "seed":
            kwargs["seed"] = _int(value, f"{path}.seed")
        elif key == "new_layer_params":
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise ConfigError(f"{path}.new_layer_params: expected a list of parameter names")
            kwargs[key] = tuple(value)
        elif key in _TRAIN_FIELDS:
            kwargs[key] = _int(value, f"{path}.{key}") if _TRAIN_FIELDS[key] == "int" else _num(value, f"{path}.{key}")
        else:
            raise ConfigError(f"{path}.{key}: unknown field")
    kwargs.setdefault("seed", seed)
    try:
        return TrainConfig(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _parse_method(obj, path, seed) -> MethodConfig:
    name = _req(obj, "name", path)
    trainer = _choice(obj.get("trainer", "precomputed"), TRAINERS, f"{path}.trainer")
    dims = _req(obj, "dims", path)
    if not isinstance(dims, list) or not dims:
        raise ConfigError(f"{path}.dims: expected a non-empty list")
    dims = [_int(v, f"{path}.dims[{i}]", 1) for i, v in enumerate(dims)]
    m = MethodConfig(
        name=str(name),
        trainer=trainer,
        variant=_choice(obj.get("variant", "plain"), ("plain", "FCR1", "FCR2"), f"{path}.variant"),
        reduction=_choice(obj.get("reduction", "identity"), REDUCTIONS, f"{path}.reduction"),
        dims=dims,
        normalization=_choice(obj.get("normalization", "l2"), NORMALIZATIONS, f"{path}.normalization"),
        distance=_choice(obj.get("distance", "euclidean"), DISTANCES, f"{path}.distance"),
        order=_choice(obj.get("order", "reduce-then-normalize"), ORDERS, f"{path}.order"),
        margin=_num(obj.get("margin", 1.0), f"{path}.margin"),
        dropout_rate=_num(obj.get("dropout_rate", 0.5), f"{path}.dropout_rate"),
        train=_parse_train(obj.get("train"), f"{path}.train", seed),
        invariant=obj.get("invariant"),
        raw=obj,
    )
    bottleneck = trainer == "contrastive" or (trainer == "softmax" and m.variant != "plain")
    if bottleneck and m.reduction != "identity":
        raise ConfigError(
            f"{path}.reduction: {trainer}/{m.variant} sets dims through its bottleneck; use 'identity'"
        )
    if m.distance == "invariant-shift":
        if m.reduction != "identity":
            raise ConfigError(f"{path}.reduction: invariant-shift distance needs 'identity'")
        if m.normalization != "none":
            raise ConfigError(f"{path}.normalization: invariant-shift distance needs 'none'")
        if trainer == "contrastive":
            raise ConfigError(f"{path}.distance: contrastive models have no output layer")
        if trainer == "precomputed":
            inv = m.invariant
            if not isinstance(inv, dict) or not ("w" in inv or "checkpoint" in inv):
                raise ConfigError(
                    f"{path}.invariant: precomputed features need {{'w': path}} or {{'checkpoint': path}}"
                )
    if m.margin <= 0:
        raise ConfigError(f"{path}.margin: must be > 0")
    if not (0.0 <= m.dropout_rate < 1.0):
        raise ConfigError(f"{path}.dropout_rate: must be in [0, 1)")
    return m


def parse_config(obj: dict, base_dir=None) -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config: expected a JSON object")
    version = _req(obj, "version", "config")
    if version != CONFIG_VERSION:
        raise ConfigError(f"config.version: unsupported version {version!r}")
    seed = _int(_req(obj, "seed", "config"), "config.seed")
    data = _req(obj, "data", "config")
    kind = _choice(_req(data, "kind", "config.data"), ("blobs", "files"), "config.data.kind")
    if kind == "blobs":
        for key in ("n_classes", "samples_per_class", "dims"):
            _int(_req(data, key, "config.data"), f"config.data.{key}", 1)
    elif "train" in data or "test" in data:
        for side in ("train", "test"):
            part = _req(data, side, "config.data")
            _req(part, "features", f"config.data.{side}")
            _req(part, "labels", f"config.data.{side}")
    else:
        _req(data, "features", "config.data")
        _req(data, "labels", "config.data")

    split_obj = obj.get("split", {"rule": "first-half"})
    rule = _choice(_req(split_obj, "rule", "config.split"), ("first-half", "explicit"), "config.split.rule")
    split = SplitSpec(
        rule,
        tuple(split_obj["train_classes"]) if "train_classes" in split_obj else None,
        tuple(split_obj["test_classes"]) if "test_classes" in split_obj else None,
        seed,
    )
    if rule == "explicit" and (split.train_classes is None or split.test_classes is None):
        raise ConfigError("config.split: explicit rule needs train_classes and test_classes")

    fractions = obj.get("fractions", [1.0])
    if not isinstance(fractions, list) or not fractions:
        raise ConfigError("config.fractions: expected a non-empty list")
    for i, f in enumerate(fractions):
        if not (0.0 < _num(f, f"config.fractions[{i}]") <= 1.0):
            raise ConfigError(f"config.fractions[{i}]: must be in (0, 1], got {f}")
    if len(set(fractions)) != len(fractions):
        raise ConfigError("config.fractions: duplicate values")

    ev = obj.get("evaluation", {})
    ks = ev.get("ks", [1, 2, 4, 8])
    if not isinstance(ks, list) or not ks:
        raise ConfigError("config.evaluation.ks: expected a non-empty list")
    ks = [_int(k, f"config.evaluation.ks[{i}]", 1) for i, k in enumerate(ks)]

    methods = _req(obj, "methods", "config")
    if not isinstance(methods, list) or not methods:
        raise ConfigError("config.methods: at least one method is required")
    parsed = [_parse_method(mo, f"config.methods[{i}]", seed) for i, mo in enumerate(methods)]
    names = [m.name for m in parsed]
    if len(set(names)) != len(names):
        raise ConfigError("config.methods: method names must be unique")

    return ExperimentConfig(
        seed=seed,
        data=data,
        split=split,
        fractions=[float(f) for f in fractions],
        methods=parsed,
        kmeans_runs=_int(ev.get("kmeans_runs", 100), "config.evaluation.kmeans_runs", 1),
        ks=ks,
        nmi_variant=_choice(ev.get("nmi_variant", "arithmetic"), NMI_VARIANTS, "config.evaluation.nmi_variant"),
        kmeans_max_iters=_int(ev.get("kmeans_max_iters", 300), "config.evaluation.kmeans_max_iters", 1),
        kmeans_tolerance=_num(ev.get("kmeans_tolerance", 1e-6), "config.evaluation.kmeans_tolerance"),
        kmeans_transfer_refinement=_bool(
            ev.get("kmeans_transfer_refinement", True), "config.evaluation.kmeans_transfer_refinement"
        ),
        base_dir=Path(base_dir) if base_dir is not None else Path.cwd(),
        raw=obj,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(obj, base_dir=path.parent)


def load_data(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    data = cfg.data
    if data["kind"] == "blobs":
        ds = make_blobs(
            data["n_classes"], data["samples_per_class"], data["dims"],
            float(data.get("cluster_std", 1.0)), float(data.get("separation", 10.0)),
            int(data.get("seed", cfg.seed)),
        )
        return class_disjoint_split(ds, cfg.split)
    fmt = data.get("format")
    if "train" in data:
        train_ds = load_dataset(cfg.resolve(data["train"]["features"]), cfg.resolve(data["train"]["labels"]), fmt)
        test_ds = load_dataset(cfg.resolve(data["test"]["features"]), cfg.resolve(data["test"]["labels"]), fmt)
        overlap = set(train_ds.classes.tolist()) & set(test_ds.classes.tolist())
        if overlap:
            raise ConfigError(f"config.data: train and test share classes {sorted(overlap)[:5]}")
        return train_ds, test_ds
    ds = load_dataset(cfg.resolve(data["features"]), cfg.resolve(data["labels"]), fmt)
    return class_disjoint_split(ds, cfg.split)


def _contiguous(ds: LabeledDataset) -> LabeledDataset:
    _, inverse = np.unique(ds.labels, return_inverse=True)
    return LabeledDataset(ds.features, inverse, ds.ids)


def _external_metric(cfg: ExperimentConfig, method: MethodConfig) -> InvariantShiftMetric:
    inv = method.invariant
    if "checkpoint" in inv:
        model = load_checkpoint(cfg.resolve(inv["checkpoint"]))
        if not isinstance(model, SoftmaxModel):
            raise ConfigError(f"method {method.name!r}: invariant checkpoint must be a softmax model")
        W = model.W
    else:
        W = load_features(cfg.resolve(inv["w"]))
    return invariant_shift_basis(W, float(inv.get("rank_tolerance", 1e-10)))


def _fit_model(method: MethodConfig, train_ds: LabeledDataset, dims: int, seed: int):
    d = train_ds.features.shape[1]
    if method.trainer == "contrastive":
        model = init_contrastive(d, dims, seed, method.margin)
    else:
        n_classes = len(train_ds.classes)
        m = None if method.variant == "plain" else dims
        model = init_model(method.variant, d, n_classes, m, seed, method.dropout_rate)
    result = train(model, train_ds, method.train)
    return result.model, result.loss_trace


def _reduce(method, dims, train_x, test_x, seed):
    d = train_x.shape[1]
    if method.reduction == "pca":
        proj = fit_pca(train_x, dims)
    elif method.reduction == "random":
        proj = fit_random_projection(d, dims, seed)
    else:
        proj = identity_projection(d)
    return apply_projection(proj, train_x), apply_projection(proj, test_x)


def run_cell(cfg: ExperimentConfig, method: MethodConfig, dims: int, fraction: float,
             train_full: LabeledDataset, test_ds: LabeledDataset) -> dict[str, Any]:
    start = time.perf_counter()
    train_ds = _contiguous(subsample_per_class(train_full, fraction, cfg.seed))
    in_dims = train_ds.features.shape[1]
    uses_input_dims = method.trainer == "precomputed" or (
        method.trainer == "softmax" and method.variant == "plain"
    )
    if uses_input_dims and method.reduction == "identity" and dims != in_dims:
        raise ConfigError(
            f"method {method.name!r}: identity reduction keeps {in_dims} dims, got dims={dims}"
        )
    if dims > in_dims:
        raise ConfigError(f"method {method.name!r}: dims={dims} exceeds input dims {in_dims}")

    trace = None
    model = None
    if method.trainer == "precomputed":
        train_x, test_x = train_ds.features, test_ds.features
    else:
        model, trace = _fit_model(method, train_ds, dims, method.train.seed)
        train_x, test_x = extract_features(model, train_ds.features), extract_features(model, test_ds.features)

    if method.order == "normalize-then-reduce" and method.normalization == "l2":
        train_x, test_x = l2_normalize(train_x), l2_normalize(test_x)
    train_x, test_x = _reduce(method, dims, train_x, test_x, cfg.seed)
    if method.order == "reduce-then-normalize" and method.normalization == "l2":
        test_x = l2_normalize(test_x)

    invariant = None
    if method.distance == "invariant-shift":
        invariant = _external_metric(cfg, method) if model is None else invariant_shift_basis(model.W)
    if method.distance == "invariant-shift":
        cluster_x = invariant.embed(test_x)
    elif method.distance == "cosine":
        # k-means over unit vectors ranks points by cosine distance
        cluster_x = l2_normalize(test_x)
    else:
        cluster_x = test_x

    n_test_classes = len(test_ds.classes)
    clus = clustering_eval(
        cluster_x, test_ds.labels, k=n_test_classes, runs=cfg.kmeans_runs, seed=cfg.seed,
        nmi_variant=cfg.nmi_variant, max_iters=cfg.kmeans_max_iters, rel_tolerance=cfg.kmeans_tolerance,
        transfer_refinement=cfg.kmeans_transfer_refinement,
    )
    ret = recall_at_k(test_x, test_ds.labels, cfg.ks, method.distance, invariant)
    counts = np.bincount(train_ds.labels)
    cell = {
        "method": method.name,
        "dims": dims,
        "fraction": fraction,
        "config": method.raw,
        "n_train": len(train_ds),
        "n_train_classes": int(len(counts)),
        "min_train_samples_per_class": int(counts.min()),
        "n_test": len(test_ds),
        "n_test_classes": n_test_classes,
        "pipeline": _pipeline_description(method),
        "clustering": clus.to_dict(),
        "retrieval": ret.to_dict(),
        "wall_clock_seconds": time.perf_counter() - start,
    }
    if trace is not None:
        cell["loss_trace"] = trace
    return cell


def _pipeline_description(method: MethodConfig) -> list[str]:
    steps = ["subsample-train"]
    if method.trainer != "precomputed":
        steps.append(f"train-{method.trainer}" + ("" if method.trainer == "contrastive" else f"-{method.variant}"))
    steps.append("extract-eval-mode")
    reduce_step = f"reduce-{method.reduction}"
    if method.normalization == "l2":
        pair = ["l2-normalize", reduce_step] if method.order == "normalize-then-reduce" else [reduce_step, "l2-normalize"]
    else:
        pair = [reduce_step]
    return steps + pair + [f"distance-{method.distance}", "kmeans-nmi", "recall-at-k"]


def run_experiment(cfg: ExperimentConfig) -> dict[str, Any]:
    """Run every (method, dims, fraction) cell; returns the JSON-ready report."""
    if isinstance(cfg, dict):
        cfg = parse_config(cfg)
    start = time.perf_counter()
    train_full, test_ds = load_data(cfg)
    # fail before any training if an external W cannot be used
    for method in cfg.methods:
        if method.distance == "invariant-shift" and method.trainer == "precomputed":
            metric = _external_metric(cfg, method)
            if metric.dims != test_ds.features.shape[1]:
                raise ConfigError(
                    f"method {method.name!r}: W has {metric.dims} columns, features have "
                    f"{test_ds.features.shape[1]} dims"
                )
    cells = [
        run_cell(cfg, method, dims, fraction, train_full, test_ds)
        for method in cfg.methods
        for dims in method.dims
        for fraction in cfg.fractions
    ]
    return {
        "report_version": 1,
        "library_version": __version__,
        "nmi_variant": cfg.nmi_variant,
        "recall_definition": "hit if any of the K nearest other rows shares the query's class",
        "kmeans": {
            "runs": cfg.kmeans_runs, "k": "number of test classes", "init": "greedy k-means++",
            "max_iters": cfg.kmeans_max_iters, "rel_tolerance": cfg.kmeans_tolerance,
            "transfer_refinement": cfg.kmeans_transfer_refinement,
            "seeds": f"{cfg.seed}..{cfg.seed + cfg.kmeans_runs - 1}",
        },
        "config": cfg.raw,
        "n_train_full": len(train_full),
        "n_test": len(test_ds),
        "cells": cells,
        "wall_clock_seconds": time.perf_counter() - start,
    }


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def strip_timing(report: dict) -> dict:
    """Copy of ``report`` without clock-dependent fields."""
    out = {k: v for k, v in report.items() if k not in TIMING_KEYS}
    out["cells"] = [{k: v for k, v in c.items() if k not in TIMING_KEYS} for c in report.get("cells", [])]
    return out


def emit_table(report: dict, axis: str = "dims") -> str:
    """CSV table, one row per (method, other-axis value, axis value).

    Sorted by method name, then the other axis, then ``axis`` ascending.
    Scores are formatted with 4 decimals.
    """
    if axis not in ("dims", "fraction"):
        raise ConfigError(f"axis must be 'dims' or 'fraction', got {axis!r}")
    cells = report.get("cells") or []
    if not cells:
        raise ConfigError("report has no cells")
    other = "fraction" if axis == "dims" else "dims"
    ks = sorted({int(k) for c in cells for k in c["retrieval"]["recall_at"]})
    rows = sorted(cells, key=lambda c: (c["method"], c[other], c[axis]))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", axis, other, "nmi_mean", "nmi_std"] + [f"recall@{k}" for k in ks])
    for c in rows:
        rec = c["retrieval"]["recall_at"]
        writer.writerow(
            [c["method"], c[axis], c[other],
             f"{c['clustering']['nmi_mean']:.4f}", f"{c['clustering']['nmi_std']:.4f}"]
            + [f"{rec[str(k)]:.4f}" if str(k) in rec else "" for k in ks]
        )
    return buf.getvalue()
