"""Command-line interface: ``rtdnet fit|rank|train|predict|experiment|synth``.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .core import DataError, derive_seed, load_dataset, load_features, load_runtimes
from .distnet import DistNetModel, NetworkConfig, TrainConfig
from .distnet import MODEL_FORMAT as DISTNET_FORMAT
from .distnet import train as train_distnet
from .distributions import Family, mle_fit, ppf
from .experiments import (
    MODELS,
    ModelSettings,
    SynthSpec,
    generate_synthetic,
    run_q1,
    run_q2,
    run_q3,
    write_report,
)
from .forest import MODEL_FORMAT as FOREST_FORMAT
from .forest import ForestModel, ForestParams, train_forest
from .metrics import instance_nllh, rank_families, write_ranking

logger = logging.getLogger("rtdnet")

OUTPUT_DIR_ENV = "RTDNET_OUTPUT_DIR"
EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments detected after parsing (maps to exit code 2)."""


# -- argument types ---------------------------------------------------------

def _family(value: str) -> Family:
    try:
        return Family.parse(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _family_list(value: str) -> list[Family]:
    return [_family(v.strip()) for v in value.split(",") if v.strip()]


def _int_list(value: str) -> list[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None


def _quantiles(value: str) -> list[float]:
    try:
        qs = [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated probabilities, got {value!r}") from None
    if any(not 0.0 < q < 1.0 for q in qs):
        raise argparse.ArgumentTypeError("quantiles must lie strictly between 0 and 1")
    return qs


def _probability(value: str) -> float:
    try:
        a = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {value!r}") from None
    if not 0.0 < a < 1.0:
        raise argparse.ArgumentTypeError("alpha must lie strictly between 0 and 1")
    return a


def _positive_int(value: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {value!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


# -- helpers ----------------------------------------------------------------

def _default_out(name: str) -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, ".")) / name


def _run_config(args: argparse.Namespace, **effective) -> dict:
    cfg = {"command": args.command, "version": __version__}
    for key, value in sorted(vars(args).items()):
        if key in ("command", "handler", "log_level"):
            continue
        cfg[key] = _jsonable(value)
    cfg.update({k: _jsonable(v) for k, v in effective.items()})
    return cfg


def _jsonable(value):
    if isinstance(value, Family):
        return value.value
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


def _echo_config(cfg: dict) -> None:
    print("effective config: " + json.dumps(cfg, sort_keys=True), file=sys.stderr)


def _write_json(path: Path, doc: dict, *, indent: int | None = 1) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=indent) + "\n")


def _format_quantile(q: float) -> str:
    return f"q{100 * q:g}"


# -- commands ---------------------------------------------------------------

def cmd_fit(args) -> int:
    runtimes = load_runtimes(args.runtimes)
    if args.instance is not None:
        if args.instance not in runtimes:
            raise DataError(f"instance {args.instance!r} not found in {args.runtimes}")
        runtimes = {args.instance: runtimes[args.instance]}
    cfg = _run_config(args)
    _echo_config(cfg)
    fits, failed = [], []
    for iid, times in runtimes.items():
        try:
            params = mle_fit(args.family, times)
        except ValueError as exc:
            failed.append({"instance": iid, "error": str(exc)})
            continue
        rec = instance_nllh(iid, params, times)
        fits.append({
            "instance": iid,
            "params": params.to_dict(),
            "k": rec.k,
            "nllh": rec.nllh,
            "normalized_nllh": rec.normalized_nllh,
        })
    doc = {"run_config": cfg, "fits": fits, "failed": failed}
    text = json.dumps(doc, indent=1) + "\n"
    if args.out:
        _write_json(Path(args.out), doc)
    else:
        sys.stdout.write(text)
    if not fits:
        print("error: no instance could be fitted", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def cmd_rank(args) -> int:
    dataset, report = load_dataset(args.features, args.runtimes)
    out = Path(args.out) if args.out else _default_out("rank")
    cfg = _run_config(args, out=out)
    _echo_config(cfg)
    ranks = rank_families(dataset, args.families, args.alpha)
    doc = write_ranking(ranks, out, extra={"run_config": cfg, "alpha": args.alpha,
                                          "join_report": report.to_dict()})
    print(json.dumps(doc["ranking"], indent=1))
    return EXIT_OK


def _settings_from_args(args) -> ModelSettings:
    net = NetworkConfig(
        hidden_layers=tuple(args.hidden),
        activation=args.activation,
        batch_norm=not args.no_batch_norm,
        l2=args.l2,
    )
    train = TrainConfig(
        batch_size=args.batch_size,
        lr_start=args.lr_start,
        lr_end=args.lr_end,
        max_epochs=args.max_epochs,
        max_wall_seconds=args.max_wall_seconds,
        grad_clip_norm=args.grad_clip,
        shuffle_seed=derive_seed(args.seed, "shuffle"),
        init_seed=derive_seed(args.seed, "init"),
        deterministic=args.deterministic,
    )
    forest = ForestParams(
        n_trees=args.n_trees,
        max_features=args.max_features,
        min_samples_leaf=args.min_samples_leaf,
        bootstrap=not args.no_bootstrap,
        seed=derive_seed(args.seed, "forest"),
    )
    return ModelSettings(net, train, forest)


def cmd_train(args) -> int:
    dataset, report = load_dataset(args.features, args.runtimes)
    settings = _settings_from_args(args)
    cfg = _run_config(args, settings=settings.to_dict())
    _echo_config(cfg)
    summary = {"model": args.model, "family": args.family.value, "out": str(args.out),
               "n_instances": len(dataset), "warnings": 0, "excluded": [],
               "join_report": report.to_dict()}
    if args.model == "distnet":
        model = train_distnet(dataset, args.family, settings.net, settings.train)
        doc = model.to_dict()
        summary["epochs"] = model.training_log["epochs"]
        summary["stop_reason"] = model.training_log["stop_reason"]
        summary["final_train_loss"] = model.training_log["train_loss"][-1]
    else:
        model = train_forest(dataset, args.family, args.model, settings.forest,
                             constant_tol=settings.train.constant_tol)
        doc = model.to_dict()
        for iid, reason in model.excluded:
            print(f"warning: instance {iid} excluded from forest targets: {reason}", file=sys.stderr)
        summary["excluded"] = [iid for iid, _ in model.excluded]
        summary["warnings"] = len(model.excluded)
    summary["warnings"] += report.n_dropped
    doc["run_config"] = cfg
    _write_json(Path(args.out), doc, indent=1 if args.model == "distnet" else None)
    print(json.dumps(summary, indent=1))
    return EXIT_OK


def load_model(path):
    doc = json.loads(Path(path).read_text())
    fmt = doc.get("format")
    if fmt == DISTNET_FORMAT:
        return DistNetModel.from_dict(doc)
    if fmt == FOREST_FORMAT:
        return ForestModel.from_dict(doc)
    raise DataError(f"{path}: unrecognised model format {fmt!r}")


def cmd_predict(args) -> int:
    model = load_model(args.model)
    names, feats = load_features(args.features)
    n_expected = model.pipeline.n_raw
    if len(names) != n_expected:
        raise DataError(f"{args.features}: model expects {n_expected} features, file has {len(names)}")
    cfg = _run_config(args)
    _echo_config(cfg)
    ids = list(feats)
    X = np.vstack([feats[i] for i in ids]) if ids else np.empty((0, n_expected))
    params = model.predict(X) if ids else []
    fam = model.family
    header = ["instance", *fam.param_names, *(_format_quantile(q) for q in args.quantiles)]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(header)
        for iid, p in zip(ids, params):
            w.writerow([iid, *(repr(float(v)) for v in p.theta),
                        *(repr(float(ppf(p, q))) for q in args.quantiles)])
    finally:
        if args.out:
            out.close()
    if args.out:
        _write_json(Path(str(args.out) + ".config.json"), cfg)
    return EXIT_OK


def _bundled_config(name: str) -> Path | None:
    ref = resources.files("rtdnet") / "configs" / f"{name}.json"
    return Path(str(ref)) if ref.is_file() else None


def _load_experiment_config(spec: str | None) -> tuple[dict, Path]:
    if spec is None:
        return {}, Path(".")
    path = Path(spec)
    if not path.exists():
        bundled = _bundled_config(spec)
        if bundled is None:
            raise FileNotFoundError(f"config file not found: {spec}")
        path = bundled
    return json.loads(path.read_text()), path.parent


EXPERIMENT_KEYS = {"question", "family", "families", "alpha", "data", "synth", "folds", "models",
                   "k_grid", "repetitions", "seed", "deterministic", "jobs", "settings"}


def cmd_experiment(args) -> int:
    conf, base = _load_experiment_config(args.config)
    unknown = set(conf) - EXPERIMENT_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    # flags override the config file
    for key in ("family", "families", "alpha", "folds", "models", "k_grid", "repetitions",
                "seed", "deterministic", "jobs"):
        value = getattr(args, key)
        if value is not None and value is not False:
            conf[key] = _jsonable(value)
    question = args.q if args.q is not None else conf.get("question")
    if question not in (1, 2, 3):
        raise UsageError("choose the question with --q 1|2|3 (or 'question' in the config)")
    conf["question"] = question
    conf.setdefault("seed", 0)
    conf.setdefault("deterministic", False)
    conf.setdefault("jobs", 1)
    settings = ModelSettings.from_dict(conf.get("settings", {}))
    if args.max_epochs is not None:
        settings = ModelSettings(settings.net,
                                 TrainConfig(**{**asdict(settings.train), "max_epochs": args.max_epochs}),
                                 settings.forest)
    conf["settings"] = settings.to_dict()

    if "data" in conf:
        data = conf["data"]
        fpath = (base / data["features"]) if not Path(data["features"]).is_absolute() else Path(data["features"])
        rpath = (base / data["runtimes"]) if not Path(data["runtimes"]).is_absolute() else Path(data["runtimes"])
        dataset, _ = load_dataset(fpath, rpath)
        conf["data"] = {"features": str(fpath), "runtimes": str(rpath)}
    else:
        spec = SynthSpec.from_dict(conf.get("synth", {}))
        conf["synth"] = spec.to_dict()
        dataset = generate_synthetic(spec).dataset

    out = Path(args.out) if args.out else _default_out(f"q{question}")
    cfg = {"command": "experiment", "version": __version__, "out": str(out), **conf}
    _echo_config(cfg)
    common = dict(seed=conf["seed"], deterministic=conf["deterministic"], config=cfg)
    if question == 1:
        families = [Family.parse(f) for f in conf.get("families", [f.value for f in Family])]
        report = run_q1(dataset, families, alpha=conf.get("alpha", 0.01), **common)
    else:
        family = Family.parse(conf.get("family", "LOG"))
        kw = dict(folds=conf.get("folds", 10), settings=settings, jobs=conf["jobs"], **common)
        if question == 2:
            report = run_q2(dataset, family, models=conf.get("models", list(MODELS)), **kw)
        else:
            report = run_q3(dataset, family, k_grid=conf.get("k_grid", [2, 4, 8, 16, 32, 64, 100]),
                            repetitions=conf.get("repetitions", 10),
                            models=[m for m in conf.get("models", ["mrf", "distnet"]) if m != "fitted"],
                            **kw)
    paths = write_report(report, out)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=1))
    return EXIT_OK


def cmd_synth(args) -> int:
    spec_doc = json.loads(Path(args.spec).read_text()) if args.spec else {}
    for key in ("family", "n_instances", "n_features", "k_observations", "seed"):
        value = getattr(args, key)
        if value is not None:
            spec_doc[key] = _jsonable(value)
    spec = SynthSpec.from_dict(spec_doc)
    out = Path(args.out) if args.out else _default_out("synth")
    cfg = _run_config(args, out=out, spec=spec.to_dict())
    _echo_config(cfg)
    data = generate_synthetic(spec)
    paths = data.write(out)
    _write_json(out / "run_config.json", cfg)
    # ready-made experiment config pointing at the files just written
    _write_json(out / "experiment.json", {
        "family": spec.family.value,
        "data": {"features": paths["features"].name, "runtimes": paths["runtimes"].name},
        "seed": spec.seed,
    })
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=1))
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def _add_training_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("DistNet")
    g.add_argument("--hidden", type=_int_list, default=[16, 16], help="hidden layer widths, comma-separated")
    g.add_argument("--activation", choices=["tanh", "relu"], default="tanh")
    g.add_argument("--no-batch-norm", action="store_true", help="disable batch normalisation")
    g.add_argument("--l2", type=float, default=1e-4, help="L2 penalty on weights")
    g.add_argument("--batch-size", type=_positive_int, default=16)
    g.add_argument("--lr-start", type=float, default=1e-3)
    g.add_argument("--lr-end", type=float, default=1e-5)
    g.add_argument("--max-epochs", type=_positive_int, default=1000)
    g.add_argument("--max-wall-seconds", type=float, default=3600.0)
    g.add_argument("--grad-clip", type=float, default=1.0, help="global gradient-norm clip")
    g = p.add_argument_group("random forest")
    g.add_argument("--n-trees", type=_positive_int, default=100)
    g.add_argument("--max-features", type=_positive_int, default=None,
                   help="features tried per split; None means ceil(m/3)")
    g.add_argument("--min-samples-leaf", type=_positive_int, default=1)
    g.add_argument("--no-bootstrap", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="rtdnet", formatter_class=fmt,
                                     description="Fit and predict runtime distributions.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("fit", formatter_class=fmt, help="maximum-likelihood fit per instance")
    p.add_argument("--runtimes", required=True, help="CSV with header instance,seed,runtime")
    p.add_argument("--family", required=True, type=_family, help="N, LOG, EXP or INV")
    p.add_argument("--instance", default=None, help="fit only this instance")
    p.add_argument("--out", default=None, help="write JSON here instead of stdout")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("rank", formatter_class=fmt, help="rank RTD families by normalised NLLH")
    p.add_argument("--features", required=True)
    p.add_argument("--runtimes", required=True)
    p.add_argument("--families", type=_family_list, default=list(Family), help="comma-separated families")
    p.add_argument("--alpha", type=_probability, default=0.01, help="KS test significance level")
    p.add_argument("--out", default=None, help=f"output directory (default ${OUTPUT_DIR_ENV}/rank)")
    p.set_defaults(handler=cmd_rank)

    p = sub.add_parser("train", formatter_class=fmt, help="train DistNet or a forest baseline")
    p.add_argument("--features", required=True)
    p.add_argument("--runtimes", required=True)
    p.add_argument("--family", required=True, type=_family)
    p.add_argument("--model", choices=["distnet", "irf", "mrf"], default="distnet")
    p.add_argument("--out", required=True, help="model JSON file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true",
                   help="disable the wall-clock stop and timing fields")
    _add_training_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("predict", formatter_class=fmt, help="predict RTD parameters (seconds)")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--quantiles", type=_quantiles, default=[], help="e.g. 0.5,0.9")
    p.add_argument("--out", default=None, help="CSV file (default stdout)")
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("experiment", formatter_class=fmt, help="run an evaluation protocol")
    p.add_argument("--q", type=int, choices=[1, 2, 3], default=None)
    p.add_argument("--config", default=None,
                   help="JSON config file, or the name of a bundled config (e.g. 'small')")
    p.add_argument("--out", default=None, help=f"output directory (default ${OUTPUT_DIR_ENV}/q<N>)")
    p.add_argument("--family", type=_family, default=None)
    p.add_argument("--families", type=_family_list, default=None)
    p.add_argument("--alpha", type=_probability, default=None)
    p.add_argument("--folds", type=_positive_int, default=None)
    p.add_argument("--models", type=lambda v: [m.strip() for m in v.split(",")], default=None)
    p.add_argument("--k-grid", dest="k_grid", type=_int_list, default=None)
    p.add_argument("--repetitions", type=_positive_int, default=None)
    p.add_argument("--max-epochs", type=_positive_int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--jobs", type=_positive_int, default=None, help="worker processes")
    p.set_defaults(handler=cmd_experiment)

    p = sub.add_parser("synth", formatter_class=fmt, help="generate a synthetic dataset")
    p.add_argument("--spec", default=None, help="JSON synthetic spec (default: built-in LOG spec)")
    p.add_argument("--out", default=None, help=f"output directory (default ${OUTPUT_DIR_ENV}/synth)")
    p.add_argument("--family", type=_family, default=None)
    p.add_argument("--n-instances", type=_positive_int, default=None)
    p.add_argument("--n-features", type=_positive_int, default=None)
    p.add_argument("--k-observations", type=_positive_int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(handler=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rtdnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        name = exc.filename if exc.filename else str(exc)
        print(f"error: file not found: {name}", file=sys.stderr)
        return EXIT_ERROR
    except (DataError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
