"""``embed-eval`` command line.

Exit codes: 0 success, 2 config/validation error, 3 data-format error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import NMI_VARIANTS, clustering_eval
from .dataio import LabeledDataset, load_dataset, load_features, save_features, save_labels, subsample_per_class
from .errors import ConfigError, DataFormatError, EmbedEvalError, NumericError
from .experiment import _parse_train, dumps_report, emit_table, load_config, run_experiment
from .metrics import invariant_shift_basis
from .retrieval import recall_at_k
from .training import (
    SoftmaxModel,
    extract_features,
    init_contrastive,
    init_model,
    load_checkpoint,
    make_blobs,
    save_checkpoint,
    train,
)
from .transforms import (
    apply_projection,
    fit_pca,
    fit_random_projection,
    identity_projection,
    save_projection,
)

log = logging.getLogger("embed_eval")


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_run(args):
    cfg = load_config(args.config)
    report = run_experiment(cfg)
    _emit(dumps_report(report), args.out)
    log.info("wrote %d cells", len(report["cells"]))


def cmd_reduce(args):
    x = load_features(args.inp)
    fit_x = load_features(args.fit) if args.fit else x
    if args.kind == "pca":
        proj = fit_pca(fit_x, args.dims)
    elif args.kind == "random":
        proj = fit_random_projection(fit_x.shape[1], args.dims, args.seed)
    else:
        if args.dims != x.shape[1]:
            raise ConfigError(f"--dims: identity keeps {x.shape[1]} dims, got {args.dims}")
        proj = identity_projection(x.shape[1])
    save_features(apply_projection(proj, x), args.out)
    if args.save_projection:
        save_projection(proj, args.save_projection)


def cmd_cluster(args):
    ds = load_dataset(args.inp, args.labels)
    k = args.k if args.k is not None else len(ds.classes)
    res = clustering_eval(ds.features, ds.labels, k, args.runs, args.seed, args.nmi_variant,
                          transfer_refinement=not args.lloyd_only)
    _emit(json.dumps(res.to_dict(), indent=2) + "\n", args.out)


def cmd_retrieve(args):
    ds = load_dataset(args.inp, args.labels)
    ks = [int(k) for k in args.ks.split(",") if k.strip()]
    metric = {"invariant": "invariant-shift"}.get(args.metric, args.metric)
    invariant = None
    if metric == "invariant-shift":
        if not args.w:
            raise ConfigError("--metric invariant needs --w")
        W = load_features(args.w)
        if args.b:
            b = load_features(args.b)
            if b.shape != (1, W.shape[0]):
                raise DataFormatError(f"--b: expected a 1x{W.shape[0]} matrix, got {b.shape}")
        invariant = invariant_shift_basis(W)
    res = recall_at_k(ds.features, ds.labels, ks, metric, invariant)
    _emit(json.dumps(res.to_dict(), indent=2) + "\n", args.out)


def cmd_train(args):
    path = Path(args.config)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(obj, dict) or "seed" not in obj:
        raise ConfigError("config.seed: required field missing")
    seed = obj["seed"]
    data = obj.get("data") or {}
    if data.get("kind") == "blobs":
        ds = make_blobs(data["n_classes"], data["samples_per_class"], data["dims"],
                        float(data.get("cluster_std", 1.0)), float(data.get("separation", 10.0)), seed)
    elif "features" in data and "labels" in data:
        ds = load_dataset(path.parent / data["features"], path.parent / data["labels"])
    else:
        raise ConfigError("config.data: need kind 'blobs' or features+labels paths")
    mcfg = obj.get("model") or {}
    kind = mcfg.get("kind", "softmax")
    d = ds.features.shape[1]
    if kind == "contrastive":
        model = init_contrastive(d, int(mcfg["dims"]), seed, float(mcfg.get("margin", 1.0)))
    elif kind == "softmax":
        variant = mcfg.get("variant", "plain")
        _, inverse = np.unique(ds.labels, return_inverse=True)
        ds = LabeledDataset(ds.features, inverse, ds.ids)
        m = None if variant == "plain" else int(mcfg["dims"])
        model = init_model(variant, d, len(ds.classes), m, seed, float(mcfg.get("dropout_rate", 0.5)))
    else:
        raise ConfigError(f"config.model.kind: {kind!r} is not one of ['softmax', 'contrastive']")
    result = train(model, ds, _parse_train(obj.get("train"), "config.train", seed))
    save_checkpoint(result.model, args.out)
    if args.export_wb:
        if not isinstance(result.model, SoftmaxModel):
            raise ConfigError("--export-wb needs a softmax model")
        save_features(result.model.W, f"{args.export_wb}.W.emb1")
        save_features(result.model.b[None, :], f"{args.export_wb}.b.emb1")
    log.info("final epoch loss %.6f", result.loss_trace[-1] if result.loss_trace else float("nan"))


def cmd_extract(args):
    model = load_checkpoint(args.checkpoint)
    save_features(extract_features(model, load_features(args.inp)), args.out)


def cmd_subsample(args):
    ds = load_dataset(args.inp, args.labels)
    sub = subsample_per_class(ds, args.fraction, args.seed)
    save_features(sub.features, args.out)
    save_labels(sub.labels, args.out_labels)


def cmd_make_blobs(args):
    ds = make_blobs(args.n_classes, args.per_class, args.dims, args.std, args.separation, args.seed)
    save_features(ds.features, args.out)
    save_labels(ds.labels, args.out_labels)


def cmd_table(args):
    path = Path(args.report)
    try:
        report = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})") from None
    _emit(emit_table(report, args.axis), args.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="embed-eval", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="run a full experiment from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="report path (default: stdout)")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("reduce", help="fit and apply PCA / random / identity projection")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--kind", choices=("pca", "random", "identity"), required=True)
    s.add_argument("--dims", type=int, required=True)
    s.add_argument("--fit", help="features to fit on (default: --in)")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--save-projection", help="write the fitted projection sidecar here")
    s.set_defaults(func=cmd_reduce)

    s = sub.add_parser("cluster", help="repeated k-means + NMI")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--k", type=int, help="default: number of classes")
    s.add_argument("--runs", type=int, default=100)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--nmi-variant", choices=NMI_VARIANTS, default="arithmetic")
    s.add_argument("--lloyd-only", action="store_true",
                   help="skip the single-point transfer pass after Lloyd iterations")
    s.add_argument("--out")
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("retrieve", help="Recall@K")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--ks", default="1,2,4,8")
    s.add_argument("--metric", choices=("euclidean", "cosine", "invariant"), default="euclidean")
    s.add_argument("--w", help="C x D output matrix (EMB1), for --metric invariant")
    s.add_argument("--b", help="1 x C bias (EMB1); checked for shape, not used by the distance")
    s.add_argument("--out")
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("train", help="train a softmax or contrastive model")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--export-wb", metavar="PREFIX", help="also write PREFIX.W.emb1 and PREFIX.b.emb1")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("extract", help="eval-mode features from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("subsample", help="keep a fraction of each class")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--fraction", type=float, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--out-labels", required=True)
    s.set_defaults(func=cmd_subsample)

    s = sub.add_parser("make-blobs", help="synthetic Gaussian class blobs")
    s.add_argument("--n-classes", type=int, required=True)
    s.add_argument("--per-class", type=int, required=True)
    s.add_argument("--dims", type=int, required=True)
    s.add_argument("--std", type=float, default=1.0)
    s.add_argument("--separation", type=float, default=10.0)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--out-labels", required=True)
    s.set_defaults(func=cmd_make_blobs)

    s = sub.add_parser("table", help="CSV table from a report")
    s.add_argument("--report", required=True)
    s.add_argument("--axis", choices=("dims", "fraction"), required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_table)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except EmbedEvalError as exc:
        print(f"embed-eval: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (KeyError, TypeError, ValueError) as exc:
        print(f"embed-eval: config error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"embed-eval: numeric failure: {exc}", file=sys.stderr)
        return NumericError.exit_code
    except OSError as exc:
        print(f"embed-eval: I/O error: {exc}", file=sys.stderr)
        return DataFormatError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
