"""Command-line entry point orchestrating the experiment pipeline.

Subcommands: generate, train-cyclegan, train-casnet, convert,
train-classifier, evaluate, report, pipeline.  Every artifact-producing run
writes a run_manifest.json (config snapshot, seed, git describe, wall time)
beside its outputs.  Pipeline stages are content-addressed by their config
hash, so re-runs skip completed stages unless --force is given.  The stage
cache location can be overridden with the SIMREAL_CACHE_DIR environment
variable.
"""

import argparse
import json
import os
import subprocess
import sys
import time

from . import __version__, config as cfgmod, evalkit, synthgen, trainers
from .config import ConfigError
from .synthgen import DOMAIN_X, DOMAIN_Y, DatasetManifest


class StageError(RuntimeError):
    """A pipeline stage failed or a required upstream artifact is missing."""


def _git_describe():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10, check=False,
        )
        return out.stdout.strip() or "unknown"
    except OSError:
        return "unknown"


def write_run_manifest(out_dir, subcommand, cfg, seed, started, chash="", extra=None):
    payload = {
        "subcommand": subcommand,
        "config": cfg,
        "config_hash": chash,
        "seed": seed,
        "git_describe": _git_describe(),
        "package_version": __version__,
        "wall_time_s": round(time.time() - started, 3),
        "completed": True,
    }
    if extra:
        payload.update(extra)
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")
    return path


def _stage_is_cached(stage_dir, chash, force):
    if force:
        return False
    path = os.path.join(stage_dir, "run_manifest.json")
    if not os.path.exists(path):
        return False
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    return bool(manifest.get("completed")) and manifest.get("config_hash") == chash


def _require_manifest(path):
    candidate = path if path.endswith(".json") else os.path.join(path, "manifest.json")
    if not os.path.exists(candidate):
        raise StageError(f"missing upstream artifact: {candidate}")
    return DatasetManifest.load(candidate)


def _require_file(path, hint):
    if not os.path.exists(path):
        raise StageError(f"missing upstream artifact ({hint}): {path}")
    return path


def _parse_domain(text):
    alias = {"x": DOMAIN_X, "y": DOMAIN_Y, DOMAIN_X.lower(): DOMAIN_X, DOMAIN_Y.lower(): DOMAIN_Y}
    key = text.strip().lower()
    if key not in alias:
        raise ConfigError(f"unknown domain {text!r}; use X or Y")
    return alias[key]


def cmd_generate(args, cfg):
    started = time.time()
    out = args.out
    os.makedirs(out, exist_ok=True)
    size = args.size or cfg["generate"]["size"]
    domain = _parse_domain(args.domain)
    chash = cfgmod.config_hash({"stage": "generate", "n": args.n_per_class, "domain": domain,
                                "size": size, "seed": args.seed})
    if _stage_is_cached(out, chash, args.force):
        print(f"generate: cached at {out}")
        return 0
    manifest = synthgen.generate_dataset(args.n_per_class, domain, args.seed, out, size=size)
    write_run_manifest(out, "generate", cfg["generate"], args.seed, started, chash,
                       {"n_images": len(manifest.entries)})
    print(f"generate: wrote {len(manifest.entries)} images to {out}")
    return 0


def cmd_train_casnet(args, cfg):
    started = time.time()
    os.makedirs(args.out, exist_ok=True)
    data_x = _require_manifest(args.data_x)
    data_y = _require_manifest(args.data_y)
    tc = cfgmod.casnet_train_config(cfg, args.seed)
    chash = cfgmod.config_hash({"stage": "train-casnet", "cfg": cfg["casnet"], "losses": cfg["losses"],
                                "seed": args.seed})
    if _stage_is_cached(args.out, chash, args.force):
        print(f"train-casnet: cached at {args.out}")
        return 0
    trainers.train_casnet(data_x, data_y, tc, weights=cfgmod.loss_weights(cfg),
                          out_dir=args.out, config_hash=chash)
    write_run_manifest(args.out, "train-casnet", cfg["casnet"], args.seed, started, chash)
    print(f"train-casnet: checkpoint at {os.path.join(args.out, 'checkpoint.pt')}")
    return 0


def cmd_train_cyclegan(args, cfg):
    started = time.time()
    os.makedirs(args.out, exist_ok=True)
    data_x = _require_manifest(args.data_x)
    data_y = _require_manifest(args.data_y)
    tc = cfgmod.cyclegan_train_config(cfg, args.seed)
    chash = cfgmod.config_hash({"stage": "train-cyclegan", "cfg": cfg["cyclegan"], "seed": args.seed})
    if _stage_is_cached(args.out, chash, args.force):
        print(f"train-cyclegan: cached at {args.out}")
        return 0
    trainers.train_cyclegan(data_x, data_y, tc, out_dir=args.out, config_hash=chash)
    write_run_manifest(args.out, "train-cyclegan", cfg["cyclegan"], args.seed, started, chash)
    print(f"train-cyclegan: checkpoint at {os.path.join(args.out, 'checkpoint.pt')}")
    return 0


def cmd_convert(args, cfg):
    started = time.time()
    os.makedirs(args.out, exist_ok=True)
    ckpt = _require_file(args.ckpt, "translation checkpoint")
    data_x = _require_manifest(args.data_x)
    data_y = _require_manifest(args.data_y) if args.data_y else None
    chash = cfgmod.config_hash({"stage": "convert", "cfg": cfg["convert"], "seed": args.seed,
                                "ckpt": os.path.abspath(ckpt)})
    if _stage_is_cached(args.out, chash, args.force):
        print(f"convert: cached at {args.out}")
        return 0
    state = trainers.load_checkpoint(ckpt)
    if state.extra.get("kind") != "cyclegan" and data_y is None:
        raise StageError("convert: --data-y (style source) required for the disentangling model")
    manifest = trainers.convert_dataset(state, data_x, data_y, args.out,
                                        batch_size=cfg["convert"]["batch_size"], seed=args.seed)
    _write_conversion_grid(state, data_x, data_y, manifest, args.out, cfg)
    write_run_manifest(args.out, "convert", cfg["convert"], args.seed, started, chash,
                       {"n_images": len(manifest.entries)})
    print(f"convert: wrote {len(manifest.entries)} images to {args.out}")
    return 0


def _write_conversion_grid(state, data_x, data_y, converted, out_dir, cfg, n=8):
    """Side-by-side source/converted sample figure for visual inspection."""
    from .data import ArrayDataset

    src = ArrayDataset.from_manifest(data_x)
    conv = ArrayDataset.from_manifest(converted)
    rows = [src.images[:n], conv.images[:n]]
    evalkit.save_image_grid(rows, os.path.join(out_dir, "conversion_samples.png"), max_cols=n)


def cmd_train_classifier(args, cfg):
    started = time.time()
    os.makedirs(args.out, exist_ok=True)
    data = _require_manifest(args.data)
    tc = cfgmod.classifier_train_config(cfg, args.seed)
    if args.no_freeze:
        tc.freeze_backbone = False
    chash = cfgmod.config_hash({"stage": "train-classifier", "cfg": cfg["classifier"],
                                "freeze": tc.freeze_backbone, "seed": args.seed})
    if _stage_is_cached(args.out, chash, args.force):
        print(f"train-classifier: cached at {args.out}")
        return 0
    trainers.train_classifier(data, tc, out_dir=args.out, config_hash=chash)
    write_run_manifest(args.out, "train-classifier", cfg["classifier"], args.seed, started, chash)
    print(f"train-classifier: checkpoint at {os.path.join(args.out, 'checkpoint.pt')}")
    return 0


def cmd_evaluate(args, cfg):
    started = time.time()
    os.makedirs(args.out, exist_ok=True)
    ckpt = _require_file(args.ckpt, "classifier checkpoint")
    data = _require_manifest(args.data)
    threshold = args.threshold if args.threshold is not None else cfg["eval"]["threshold"]
    report = evalkit.evaluate(ckpt, data, threshold=threshold, batch_size=cfg["eval"]["batch_size"])
    out_json = os.path.join(args.out, f"metrics_{args.tag}.json" if args.tag else "metrics.json")
    report.save(out_json)
    matrix = evalkit.confusion_matrix(report)
    evalkit.plot_confusion(matrix, os.path.splitext(out_json)[0] + "_confusion.png",
                           title=args.tag or "confusion")
    write_run_manifest(args.out, "evaluate", cfg["eval"], args.seed, started,
                       extra={"metrics_file": out_json})
    print(f"evaluate: accuracy={report.accuracy:.4f} f1={report.f1:.4f} -> {out_json}")
    return 0


def _pipeline_layout(out_root):
    cache_root = os.environ.get("SIMREAL_CACHE_DIR") or os.path.join(out_root, "stages")
    return cache_root


def run_pipeline(cfg, seed, out_root, force=False):
    """Generate data, train the translation system, convert, train both
    classifier arms, evaluate the four conditions, and write the report."""
    started = time.time()
    os.makedirs(out_root, exist_ok=True)
    cache = _pipeline_layout(out_root)
    os.makedirs(cache, exist_ok=True)
    gen = cfg["generate"]

    def stage_dir(name, chash):
        return os.path.join(cache, f"{name}-{chash}")

    def generate_stage(name, n, domain, stage_seed):
        chash = cfgmod.config_hash({"stage": name, "n": n, "domain": domain,
                                    "size": gen["size"], "seed": stage_seed})
        d = stage_dir(name, chash)
        if not _stage_is_cached(d, chash, force):
            t0 = time.time()
            os.makedirs(d, exist_ok=True)
            synthgen.generate_dataset(n, domain, stage_seed, d, size=gen["size"])
            write_run_manifest(d, f"pipeline:{name}", gen, stage_seed, t0, chash)
        return d, chash

    def wrap(name, chash_payload, builder):
        chash = cfgmod.config_hash(chash_payload)
        d = stage_dir(name, chash)
        if not _stage_is_cached(d, chash, force):
            t0 = time.time()
            os.makedirs(d, exist_ok=True)
            try:
                builder(d, chash)
            except Exception as exc:
                raise StageError(f"stage {name!r} failed: {exc}") from exc
            write_run_manifest(d, f"pipeline:{name}", cfg, seed, t0, chash)
        return d, chash

    ds = trainers.derive_seed
    x_train_dir, h_xtr = generate_stage("data_x_train", gen["x_train_per_class"], DOMAIN_X, ds(seed, "x_train"))
    x_test_dir, h_xte = generate_stage("data_x_test", gen["x_test_per_class"], DOMAIN_X, ds(seed, "x_test"))
    y_style_dir, h_yst = generate_stage("data_y_style", gen["y_style_per_class"], DOMAIN_Y, ds(seed, "y_style"))
    y_eval_dir, h_yev = generate_stage("data_y_eval", gen["y_eval_per_class"], DOMAIN_Y, ds(seed, "y_eval"))

    x_train = _require_manifest(x_train_dir)
    x_test = _require_manifest(x_test_dir)
    y_style = _require_manifest(y_style_dir)
    y_eval = _require_manifest(y_eval_dir)

    def casnet_builder(d, chash):
        tc = cfgmod.casnet_train_config(cfg, ds(seed, "casnet"))
        trainers.train_casnet(x_train, y_style, tc, weights=cfgmod.loss_weights(cfg),
                              out_dir=d, config_hash=chash)

    casnet_dir, h_cas = wrap("casnet", {"stage": "casnet", "cfg": cfg["casnet"],
                                        "losses": cfg["losses"], "seed": seed,
                                        "up": [h_xtr, h_yst]}, casnet_builder)
    ckpt_path = _require_file(os.path.join(casnet_dir, "checkpoint.pt"), "translation checkpoint")

    def convert_builder(src_manifest, convert_seed):
        def _build(d, chash):
            state = trainers.load_checkpoint(ckpt_path)
            manifest = trainers.convert_dataset(state, src_manifest, y_style, d,
                                                batch_size=cfg["convert"]["batch_size"], seed=convert_seed)
            _write_conversion_grid(state, src_manifest, y_style, manifest, d, cfg)
        return _build

    conv_train_dir, h_ctr = wrap("convert_train", {"stage": "convert_train", "cfg": cfg["convert"],
                                                   "seed": seed, "up": [h_cas, h_xtr, h_yst]},
                                 convert_builder(x_train, ds(seed, "convert_train")))
    conv_test_dir, h_cte = wrap("convert_test", {"stage": "convert_test", "cfg": cfg["convert"],
                                                 "seed": seed, "up": [h_cas, h_xte, h_yst]},
                                convert_builder(x_test, ds(seed, "convert_test")))
    conv_train = _require_manifest(conv_train_dir)
    conv_test = _require_manifest(conv_test_dir)

    def classifier_builder(train_manifest, clf_seed):
        def _build(d, chash):
            tc = cfgmod.classifier_train_config(cfg, clf_seed)
            trainers.train_classifier(train_manifest, tc, out_dir=d, config_hash=chash)
        return _build

    clf_raw_dir, h_craw = wrap("clf_raw", {"stage": "clf_raw", "cfg": cfg["classifier"], "seed": seed,
                                           "up": [h_xtr]}, classifier_builder(x_train, ds(seed, "clf_raw")))
    clf_conv_dir, h_cconv = wrap("clf_converted", {"stage": "clf_converted", "cfg": cfg["classifier"],
                                                   "seed": seed, "up": [h_ctr]},
                                 classifier_builder(conv_train, ds(seed, "clf_conv")))

    clf_raw = _require_file(os.path.join(clf_raw_dir, "checkpoint.pt"), "classifier checkpoint")
    clf_conv = _require_file(os.path.join(clf_conv_dir, "checkpoint.pt"), "classifier checkpoint")

    threshold = cfg["eval"]["threshold"]
    conditions = {
        "synthetic_raw": (clf_raw, x_test),
        "synthetic_converted": (clf_conv, conv_test),
        "sim_to_real_raw": (clf_raw, y_eval),
        "sim_to_real_converted": (clf_conv, y_eval),
    }
    reports = {}
    for name, (ckpt, manifest) in conditions.items():
        reports[name] = evalkit.evaluate(ckpt, manifest, threshold=threshold,
                                         batch_size=cfg["eval"]["batch_size"])

    report_dir = os.path.join(out_root, "report")
    os.makedirs(report_dir, exist_ok=True)
    table = evalkit.report_table(reports)
    with open(os.path.join(report_dir, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write(table)
    for name, rep in reports.items():
        rep.save(os.path.join(report_dir, f"metrics_{name}.json"))
        evalkit.plot_confusion(evalkit.confusion_matrix(rep),
                               os.path.join(report_dir, f"confusion_{name}.png"), title=name)

    gaps = {}
    for mode in ("pixels", "features"):
        kwargs = {"ckpt": clf_conv} if mode == "features" else {}
        proj_syn = evalkit.pca_features([x_test, y_eval], cfg["eval"]["pca_k"], mode=mode, **kwargs)
        proj_conv = evalkit.pca_features([conv_test, y_eval], cfg["eval"]["pca_k"], mode=mode, **kwargs)
        gaps[mode] = {
            "synthetic_vs_real": evalkit.domain_gap_score(proj_syn),
            "converted_vs_real": evalkit.domain_gap_score(proj_conv),
        }
        proj_all = evalkit.pca_features([x_test, conv_test, y_eval], cfg["eval"]["pca_k"],
                                        mode=mode, **kwargs)
        evalkit.plot_pca(proj_all, os.path.join(report_dir, f"pca_{mode}.png"),
                         title=f"domain embedding ({mode})")

    summary = {
        "seed": seed,
        "threshold": threshold,
        "metrics": {name: rep.to_dict() for name, rep in reports.items()},
        "domain_gap": gaps,
        "domain_gap_primary_mode": cfg["eval"]["pca_mode"],
        "stages": {
            "data_x_train": x_train_dir, "data_x_test": x_test_dir,
            "data_y_style": y_style_dir, "data_y_eval": y_eval_dir,
            "casnet": casnet_dir, "convert_train": conv_train_dir,
            "convert_test": conv_test_dir, "clf_raw": clf_raw_dir,
            "clf_converted": clf_conv_dir,
        },
    }
    with open(os.path.join(report_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    write_run_manifest(report_dir, "pipeline", cfg, seed, started)
    return summary


def cmd_pipeline(args, cfg):
    summary = run_pipeline(cfg, args.seed, args.out, force=args.force)
    acc_raw = summary["metrics"]["sim_to_real_raw"]["accuracy"]
    acc_conv = summary["metrics"]["sim_to_real_converted"]["accuracy"]
    print(f"pipeline: sim-to-real accuracy raw={acc_raw:.4f} converted={acc_conv:.4f}")
    print(f"pipeline: report at {os.path.join(args.out, 'report')}")
    return 0


def cmd_report(args, cfg):
    """Re-render the comparison table and figures from a finished pipeline run."""
    report_dir = os.path.join(args.run_dir, "report")
    summary_path = _require_file(os.path.join(report_dir, "report.json"), "pipeline summary")
    with open(summary_path, "r", encoding="utf-8") as fh:
        summary = json.load(fh)
    reports = {name: evalkit.MetricsReport(**d) for name, d in summary["metrics"].items()}
    table = evalkit.report_table(reports)
    out = args.out or report_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write(table)
    for name, rep in reports.items():
        evalkit.plot_confusion(evalkit.confusion_matrix(rep),
                               os.path.join(out, f"confusion_{name}.png"), title=name)
    print(table.strip())
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="simreal",
                                     description="sim-to-real deformation classification lab")
    parser.add_argument("--version", action="version", version=f"simreal {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--preset", default="desk", choices=sorted(cfgmod.PRESETS))
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--force", action="store_true", help="recompute cached stages")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="config override (repeatable)")

    p = sub.add_parser("generate", help="generate a procedural dataset")
    common(p)
    p.add_argument("--n-per-class", type=int, required=True)
    p.add_argument("--domain", required=True, help="X (synthetic) or Y (real-style)")
    p.add_argument("--size", type=int, default=None)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train-casnet", help="train the disentangling translation system")
    common(p)
    p.add_argument("--data-x", required=True)
    p.add_argument("--data-y", required=True)
    p.set_defaults(fn=cmd_train_casnet)

    p = sub.add_parser("train-cyclegan", help="train the baseline translation system")
    common(p)
    p.add_argument("--data-x", required=True)
    p.add_argument("--data-y", required=True)
    p.set_defaults(fn=cmd_train_cyclegan)

    p = sub.add_parser("convert", help="translate a dataset with a trained checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data-x", required=True)
    p.add_argument("--data-y", default=None, help="style source (disentangling model)")
    p.set_defaults(fn=cmd_convert)

    p = sub.add_parser("train-classifier", help="train the deformation classifier")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--no-freeze", action="store_true", help="train the full backbone")
    p.set_defaults(fn=cmd_train_classifier)

    p = sub.add_parser("evaluate", help="evaluate a classifier on a dataset")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--tag", default="", help="label for the output metrics file")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("report", help="render the comparison table from a pipeline run")
    common(p, out_required=False)
    p.add_argument("--run-dir", required=True, help="pipeline output root")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("pipeline", help="run the full desk-scale experiment")
    common(p)
    p.set_defaults(fn=cmd_pipeline)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config, preset=args.preset, overrides=args.overrides)
        return args.fn(args, cfg)
    except (ConfigError, StageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
