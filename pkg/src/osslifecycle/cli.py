"""Command-line entry point: ingest, synth, featurize, train, predict, evaluate, explain, ablate, report.

Every subcommand reads one YAML run config, writes only inside the run's
output directory and leaves the resolved config there. Failures produce
``error.json`` and a nonzero exit status (2 bad config, 3 missing upstream
artifact, 1 anything else).
"""

from __future__ import annotations

import argparse
import copy
import csv
import importlib.resources
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable

import jsonschema
import numpy as np
import yaml

from .evaluation import report_from_json
from .explain import FeatureCategoryMap, ablation_study, attention_profile, attribute_model, category_heatmap, \
    combine_categories, write_json
from .features import DEFAULT_K, FeaturePipeline, FeatureSet, read_feature_store_bin, split_dataset, \
    write_feature_store_bin
from .ingestion import Month, SynthesisConfig, Window, generate_synthetic_corpus, ingest_repo, read_corpus, \
    scramble_metrics, write_corpus
from .nn import heavy_config, save_checkpoint
from .pipeline import MODEL_NAMES, HierarchyModels, MissingArtifactError, RoutingThresholds, load_models, \
    predict_batch
from .schema import CATEGORY_ORDER, METRIC_CATEGORY, METRICS, Category, parse_stage
from .training import TASKS, TrainConfig, build_task_dataset, default_model_config, tune_hyperparameters
from .workflow import evaluate_pipeline, mean_test_accuracy, train_hierarchy

log = logging.getLogger("osslifecycle")

COMMANDS = ("ingest", "synth", "featurize", "train", "predict", "evaluate", "explain", "ablate", "report")
MODEL_SELECTORS = (*TASKS, "all")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": "osslifecycle-run",
    "data": {"source": "synthetic", "cache_dir": "cache", "bus_factor_coverage": 0.5,
             "synthetic": {"n_repos": 2000, "noise_level": 0.3, "boundary_margin": 0.1,
                           "mix": {"contribMid": 0.60, "toy": 0.27, "club": 0.09, "federation": 0.04},
                           "scramble_categories": []}},
    "features": {"k": DEFAULT_K, "split": [0.70, 0.15, 0.15]},
    "thresholds": {"stage1_gate": 0.85, "toy_accept": 0.70, "expert_tau": 0.5},
    "training": {},
    "heavy_model": {},
    "calibration": False,
    "evaluation": {"ece_bins": 15, "balanced_accuracy": "mean_recall"},
    "explain": {"tabular_method": "grad_input", "heavy_method": "ig", "ig_steps": 50, "shap_samples": 64,
                "max_samples": 200},
}

TINY_CORPUS = "tiny_corpus.ndjson"


class ConfigError(ValueError):
    pass


# --- config ------------------------------------------------------------------

def config_schema() -> dict:
    text = importlib.resources.files("osslifecycle").joinpath("data/run_config.schema.json").read_text("utf-8")
    return json.loads(text)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else copy.deepcopy(v)
    return out


def load_config(path: str | Path | None, seed: int | None = None, out: str | Path | None = None) -> dict:
    """Validate the user file against the schema, then fill defaults and apply flag overrides."""
    user: Any = {}
    if path is not None:
        try:
            user = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    try:
        jsonschema.validate(user, config_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc
    cfg = _merge(DEFAULTS, user)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["output_dir"] = str(out)
    if abs(sum(cfg["features"]["split"]) - 1.0) > 1e-9:
        raise ConfigError("features.split fractions must sum to 1")
    if cfg["data"]["source"] == "forge" and not cfg["data"].get("repos"):
        raise ConfigError("data.repos is required when data.source is forge")
    return cfg


# --- run directory -------------------------------------------------------------

class Run:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.root = Path(cfg["output_dir"])

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def need(self, rel: str, what: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise MissingArtifactError(f"missing {what}: {p}")
        return p

    def mkdir(self, *parts: str) -> Path:
        p = self.path(*parts)
        p.mkdir(parents=True, exist_ok=True)
        return p

    @property
    def thresholds(self) -> RoutingThresholds:
        return RoutingThresholds(**self.cfg["thresholds"], source="config")

    def corpus_path(self) -> Path:
        return self.path("corpus.ndjson")

    def features(self, part: str) -> FeatureSet:
        return read_feature_store_bin(self.need(f"features/{part}.osfs", f"{part} feature store"))

    def models(self) -> HierarchyModels:
        for name in MODEL_NAMES:
            self.need(f"models/{name}.ckpt", "checkpoint")
        return load_models(self.path("models"), calibrated=self.cfg["calibration"])


def _dump(obj: Any, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- stages --------------------------------------------------------------------

def cmd_synth(run: Run, args) -> None:
    syn = run.cfg["data"]["synthetic"]
    mix = {parse_stage(k): v for k, v in syn["mix"].items()}
    scfg = SynthesisConfig.from_mix(syn["n_repos"], mix, noise_level=syn["noise_level"],
                                    boundary_margin=syn["boundary_margin"], seed=run.cfg["seed"])
    repos = generate_synthetic_corpus(scfg)
    cats = [Category(c) for c in syn.get("scramble_categories", [])]
    if cats:
        repos = scramble_metrics(repos, tuple(m for m in METRICS if METRIC_CATEGORY[m] in cats),
                                 seed=run.cfg["seed"] + 1)
    write_corpus(repos, run.corpus_path())
    log.info("wrote %d synthetic repositories", len(repos))


def cmd_ingest(run: Run, args) -> None:
    data = run.cfg["data"]
    if data["source"] == "corpus":
        src = data.get("corpus")
        if src is None:
            with importlib.resources.as_file(importlib.resources.files("osslifecycle").joinpath(
                    f"data/{TINY_CORPUS}")) as p:
                repos = read_corpus(p)
        else:
            if not Path(src).exists():
                raise MissingArtifactError(f"missing corpus file: {src}")
            repos = read_corpus(src)
    elif data["source"] == "forge":
        if "window_end" not in data:
            raise ConfigError("data.window_end is required for forge ingestion")
        window = Window.ending(Month.parse(data["window_end"]))
        cache = run.root / data["cache_dir"]  # relative paths stay inside the run directory
        repos = [ingest_repo(r, window, cache, bus_factor_coverage=data["bus_factor_coverage"])
                 for r in data["repos"]]
    else:
        return cmd_synth(run, args)
    write_corpus(repos, run.corpus_path())
    log.info("wrote %d repositories", len(repos))


def cmd_featurize(run: Run, args) -> None:
    repos = read_corpus(run.need("corpus.ndjson", "corpus (run synth or ingest first)"))
    split = split_dataset(repos, seed=run.cfg["seed"], fractions=tuple(run.cfg["features"]["split"]))
    byid = {r.repo_id: r for r in repos}
    pipe = FeaturePipeline(k=run.cfg["features"]["k"]).fit([byid[i] for i in split.train])
    out = run.mkdir("features")
    _dump(pipe.to_json(), out / "pipeline.json")
    _dump(split.to_json(), out / "split.json")
    for part in ("train", "val", "test"):
        write_feature_store_bin(pipe.transform([byid[i] for i in split.part(part)]), out / f"{part}.osfs")


def _model_configs(run: Run, dim: int) -> dict:
    hm = run.cfg["heavy_model"]
    return {"heavy": heavy_config(dim, **hm)} if hm else {}


def cmd_train(run: Run, args) -> None:
    tasks = TASKS if args.model == "all" else (args.model,)
    train, val = run.features("train"), run.features("val")
    out = run.mkdir("models")
    overrides: dict[str, dict] = {}
    for task in tasks:
        over = dict(run.cfg["training"].get(task, {}))
        grid = over.pop("grid", None)
        if grid:
            i = TASKS.index(task)
            base = TrainConfig.for_task(task, **{"seed": run.cfg["seed"] + i, **over})
            mcfg = _model_configs(run, train.tabular.shape[1]).get(task) or \
                default_model_config(task, train.tabular.shape[1])
            res = tune_hyperparameters(grid, build_task_dataset(train, task), build_task_dataset(val, task), mcfg,
                                       base, trial_path=out / f"{task}_grid.csv")
            over.update({k: getattr(res.best_config, k) for k in grid})
        overrides[task] = over
    h = train_hierarchy(train, val, seed=run.cfg["seed"], overrides=overrides,
                        model_configs=_model_configs(run, train.tabular.shape[1]), tasks=tasks,
                        log_dir=out, calibrate_heads=run.cfg["calibration"])
    for task, res in h.results.items():
        save_checkpoint(res.model, out / f"{task}.ckpt", res.metadata())


def cmd_predict(run: Run, args) -> None:
    models = run.models()
    fs = run.features("test")
    batch = predict_batch(fs, models, run.thresholds)
    out = run.mkdir("predictions")
    batch.write(out / "predictions.csv", out / "traces.ndjson")


def cmd_evaluate(run: Run, args) -> None:
    models = run.models()
    ev = evaluate_pipeline(run.features("test"), models, run.thresholds, run.cfg["evaluation"]["ece_bins"],
                           run.cfg["evaluation"]["balanced_accuracy"])
    out = run.mkdir("evaluation")
    ev.report.write(out / "metrics.json", out / "metrics.csv")
    ev.confusion.to_csv(out / "confusion_matrix.csv")
    pred = run.mkdir("predictions")
    ev.batch.write(pred / "predictions.csv", pred / "traces.ndjson")


def _explain_inputs(run: Run) -> tuple[FeatureSet, FeatureSet]:
    n = run.cfg["explain"]["max_samples"]
    test, train = run.features("test"), run.features("train")
    return test.subset(np.arange(min(n, len(test)))), train.subset(np.arange(min(100, len(train))))


def cmd_explain(run: Run, args) -> None:
    ex = run.cfg["explain"]
    models = run.models()
    test, bg = _explain_inputs(run)
    cmap = FeatureCategoryMap.default(run.cfg["features"]["k"])
    out = run.mkdir("explain")
    reports = []
    for name in MODEL_NAMES:
        method = ex["heavy_method"] if name == "heavy" else ex["tabular_method"]
        ds = build_task_dataset(test, name)
        rep = attribute_model(name, models.get(name), ds.inputs, method, cmap,
                              targets=ds.targets if method == "grad_input" else None, steps=ex["ig_steps"],
                              background=build_task_dataset(bg, name).inputs[0], shap_samples=ex["shap_samples"],
                              seed=run.cfg["seed"])
        rep.write_csv(out / f"attribution_{name}.csv")
        reports.append(rep)
    heavy = next(r for r in reports if r.model == "heavy")
    profile = attention_profile(models.heavy, test.sequences, test.tabular)
    payload = {"heatmap": category_heatmap(reports), "combined": combine_categories(reports),
               "monthly": heavy.monthly, "recency_ratio": heavy.recency_ratio,
               "attention_profile": [float(v) for v in profile],
               "models": {r.model: r.to_json() for r in reports}}
    if heavy.monthly:
        with open(out / "monthly_attribution.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["month_index", "mean_abs_attribution", "attention"])
            for i, (v, a) in enumerate(zip(heavy.monthly, profile)):
                w.writerow([i, repr(float(v)), repr(float(a))])
    write_json(payload, out / "attribution.json")


def cmd_ablate(run: Run, args) -> None:
    imp_path = run.need("explain/attribution.json", "attribution results (run explain first)")
    importance = json.loads(imp_path.read_text(encoding="utf-8"))["combined"]
    train, val, test = (run.features(p) for p in ("train", "val", "test"))
    cats = [Category(c) for c in run.cfg.get("ablation", {}).get("categories", [c.value for c in CATEGORY_ORDER])]
    cmap = FeatureCategoryMap.default(run.cfg["features"]["k"])

    seeds = tuple(run.cfg.get("ablation", {}).get("seeds", [run.cfg["seed"]]))

    def evaluate(tr: FeatureSet, va: FeatureSet, te: FeatureSet) -> float:
        return mean_test_accuracy(tr, va, te, seeds, _model_configs(run, tr.tabular.shape[1]), run.thresholds,
                                  run.cfg["calibration"])

    if seeds == (run.cfg["seed"],):
        base = report_from_json(json.loads(run.need("evaluation/metrics.json", "evaluation metrics")
                                           .read_text(encoding="utf-8"))).accuracy
    else:
        base = evaluate(train, val, test)
    res = ablation_study(train, val, test, evaluate, cats, importance, cmap, base_accuracy=base)
    write_json(res.to_json(), run.mkdir("ablation") / "ablation.json")


def cmd_report(run: Run, args) -> None:
    """Run any stage whose artifacts are missing, then emit the report bundle."""
    from .report import emit_report
    from .evaluation import ConfusionMatrix
    from .pipeline import DecisionTrace

    if not run.corpus_path().exists():
        cmd_ingest(run, args)
    if not run.path("features", "test.osfs").exists():
        cmd_featurize(run, args)
    if any(not run.path("models", f"{m}.ckpt").exists() for m in MODEL_NAMES):
        cmd_train(run, argparse.Namespace(model="all"))
    if not run.path("evaluation", "metrics.json").exists():
        cmd_evaluate(run, args)
    if not run.path("explain", "attribution.json").exists():
        cmd_explain(run, args)
    if "ablation" in run.cfg and not run.path("ablation", "ablation.json").exists():
        cmd_ablate(run, args)
    rep = report_from_json(json.loads(run.path("evaluation", "metrics.json").read_text(encoding="utf-8")))
    cm = ConfusionMatrix.from_csv(run.path("evaluation", "confusion_matrix.csv"))
    traces, errors = [], {}
    for line in run.path("predictions", "traces.ndjson").read_text(encoding="utf-8").splitlines():
        obj = json.loads(line)
        if "error" in obj:
            errors[obj["repo_id"]] = obj["error"]
        else:
            traces.append(DecisionTrace.from_json(obj))
    attribution = json.loads(run.path("explain", "attribution.json").read_text(encoding="utf-8"))
    attribution.pop("models", None)
    abl_path = run.path("ablation", "ablation.json")
    ablation = json.loads(abl_path.read_text(encoding="utf-8")) if abl_path.exists() else None
    emit_report(rep, cm, traces, run.path("report"), attribution, ablation, errors)


HANDLERS: dict[str, Callable[[Run, argparse.Namespace], None]] = {
    "ingest": cmd_ingest, "synth": cmd_synth, "featurize": cmd_featurize, "train": cmd_train,
    "predict": cmd_predict, "evaluate": cmd_evaluate, "explain": cmd_explain, "ablate": cmd_ablate,
    "report": cmd_report,
}


# --- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="osslifecycle", description="Lifecycle-stage prediction for repositories.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="master seed (overrides seed)")
    common.add_argument("--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=f"run the {name} stage")
        if name == "train":
            sp.add_argument("model_pos", nargs="?", choices=MODEL_SELECTORS, metavar="MODEL",
                            help="model selector (same as --model)")
            sp.add_argument("--model", choices=MODEL_SELECTORS, default=None)
    return p


def _write_error(root: Path | None, status: int, kind: str, message: str, command: str | None) -> None:
    record = {"status": status, "error": kind, "message": message, "command": command}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    if root is not None:
        try:
            _dump(record, root / "error.json")
        except OSError:
            pass


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    if args.command == "train":
        args.model = args.model or args.model_pos or "all"
    root = Path(args.out) if args.out else None
    try:
        cfg = load_config(args.config, args.seed, args.out)
        run = Run(cfg)
        root = run.root
        run.root.mkdir(parents=True, exist_ok=True)
        stale = run.path("error.json")
        if stale.exists():
            stale.unlink()
        _dump(cfg, run.path("config.resolved.json"))
        HANDLERS[args.command](run, args)
    except ConfigError as exc:
        _write_error(root, 2, "invalid_config", str(exc), args.command)
        return 2
    except MissingArtifactError as exc:
        kind = "missing checkpoint" if "checkpoint" in str(exc) else "missing artifact"
        _write_error(root, 3, kind, str(exc), args.command)
        return 3
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        log.debug("failure", exc_info=True)
        _write_error(root, 1, type(exc).__name__, str(exc), args.command)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
