"""Config-driven experiment pipelines.

Commands compose the library modules into reproducible stages. Every stage
writes its artifacts atomically (temp file + rename), records content
digests in a run manifest, and skips work when the manifest already lists
identical inputs and outputs.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import replace
from importlib import metadata

import numpy as np
import yaml

from . import corpus, masks, model, pruning, similarity, transfer
from .numerics import NumericalFailure, Rng

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PREREQ = 3
EXIT_NUMERIC = 4

OUTPUT_ROOT_ENV = "SUBLINGUA_OUTPUT_ROOT"


class ConfigError(Exception):
    """Bad, unknown, or ill-typed configuration keys."""


class PrerequisiteError(Exception):
    """A required upstream artifact is missing or stale."""


# ---------------------------------------------------------------------------
# configuration


DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/default",
    "grammar": {
        "seed": 7,
        "symbol_count": 64,
    },
    "languages": {
        "count": 8,
        "shared_fraction": 0.2,
    },
    "data": {
        "train_size": 192,
        "valid_size": 48,
        "pretrain_per_language": 96,
        "sentence_length": 16,
    },
    "model": {
        "embed_dim": 32,
        "layers": 2,
        "heads": 2,
        "ffn_dim": 64,
        "max_len": 32,
    },
    "train": {
        "epochs": 3,
        "batch_size": 32,
        "initial_lr": 3e-3,
        "eval_every": 50,
    },
    "pretrain": {
        "epochs": 2,
        "batch_size": 32,
        "initial_lr": 3e-3,
        "eval_every": 100,
    },
    "pruning": {
        "rate": 0.1,
        "sparsity": 0.5,
        "fisher_samples": 64,
    },
    "transfer": {
        "task": "tag",
        "sparsity": 0.5,
        "baseline_seeds": [1, 2, 3],
    },
    "similarity": {
        "method": "svcca",
        "variance_threshold": 0.99,
        "sample_count": 96,
        "languages": ["L0", "L1"],
    },
    "retrieval": {
        "k": 4,
        "layer_index": -1,
        "sample_count": 96,
        "languages": ["L0", "L1"],
    },
}


def _check_schema(node, defaults, path=""):
    if not isinstance(node, dict):
        raise ConfigError(f"section {path or '<root>'} must be a mapping")
    for key, value in node.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        default = defaults[key]
        if isinstance(default, dict):
            _check_schema(value, default, where)
        elif isinstance(default, bool) != isinstance(value, bool):
            raise ConfigError(f"config key {where!r} has the wrong type")
        elif isinstance(default, (int, float)) \
                and not isinstance(value, (int, float)):
            raise ConfigError(f"config key {where!r} must be numeric")
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"config key {where!r} must be a string")
        elif isinstance(default, list) and not isinstance(value, list):
            raise ConfigError(f"config key {where!r} must be a list")


def _merge(defaults, overrides):
    out = copy.deepcopy(defaults)
    for key, value in overrides.items():
        if isinstance(value, dict):
            out[key] = _merge(defaults[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, seed=None, output_root=None) -> dict:
    """Schema-validated config with all defaults expanded."""
    overrides = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                overrides = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}")
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config file: {exc}")
    _check_schema(overrides, DEFAULTS)
    cfg = _merge(DEFAULTS, overrides)
    if seed is not None:
        cfg["seed"] = seed
    root = output_root if output_root is not None \
        else os.environ.get(OUTPUT_ROOT_ENV)
    if root:
        cfg["output_dir"] = os.path.join(root,
                                         os.path.basename(cfg["output_dir"]))
    return cfg


def config_digest(cfg: dict) -> str:
    # the output location is not part of the experiment identity
    pruned = {k: v for k, v in cfg.items() if k != "output_dir"}
    blob = json.dumps(pruned, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@contextmanager
def atomic_write(path):
    """Yield a temp path; rename it into place only on success."""
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


# ---------------------------------------------------------------------------
# run manifest


class RunManifest:
    """Per-stage artifact paths, content digests, and wall-clock seconds."""

    def __init__(self, out_dir: str, cfg: dict):
        self.out_dir = out_dir
        self.path = os.path.join(out_dir, "manifest.json")
        self.data = {
            "config_digest": config_digest(cfg),
            "code_version": _code_version(),
            "stages": {},
        }
        if os.path.exists(self.path):
            with open(self.path, "r", encoding="utf-8") as fh:
                stored = json.load(fh)
            if stored.get("config_digest") == self.data["config_digest"]:
                self.data = stored

    def record(self, stage: str, artifacts: list, seconds: float) -> None:
        self.data["stages"][stage] = {
            "artifacts": {os.path.relpath(p, self.out_dir): file_digest(p)
                          for p in artifacts},
            "wall_clock_seconds": round(seconds, 3),
        }
        with atomic_write(self.path) as tmp:
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(self.data, fh, indent=2, sort_keys=True)

    def up_to_date(self, stage: str) -> bool:
        entry = self.data["stages"].get(stage)
        if entry is None:
            return False
        for rel, digest in entry["artifacts"].items():
            full = os.path.join(self.out_dir, rel)
            if not os.path.exists(full) or file_digest(full) != digest:
                return False
        return True

    def require(self, stage: str, command: str) -> None:
        if not self.up_to_date(stage):
            raise PrerequisiteError(
                f"stage {stage!r} has no valid artifacts; run "
                f"`sublingua {command}` first")

    def artifact(self, stage: str, rel: str) -> str:
        return os.path.join(self.out_dir, rel)


def _code_version() -> str:
    try:
        return metadata.version("sublingua")
    except metadata.PackageNotFoundError:
        return "unversioned"


# ---------------------------------------------------------------------------
# shared world construction


class Workspace:
    """Config-derived objects shared across commands."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out_dir = cfg["output_dir"]
        os.makedirs(self.out_dir, exist_ok=True)
        self.grammar = corpus.AbstractGrammar(
            seed=cfg["grammar"]["seed"],
            symbol_count=cfg["grammar"]["symbol_count"])
        self.languages = [
            corpus.generate_language(self.grammar, i,
                                     cfg["languages"]["shared_fraction"],
                                     seed=cfg["grammar"]["seed"])
            for i in range(cfg["languages"]["count"])]
        self.by_id = {lang.language_id: lang for lang in self.languages}
        m = cfg["model"]
        self.model_cfg = model.ModelConfig(
            vocab_size=corpus.vocab_size(self.grammar, self.languages),
            embed_dim=m["embed_dim"], layers=m["layers"], heads=m["heads"],
            ffn_dim=m["ffn_dim"], max_len=m["max_len"])
        self.manifest = RunManifest(self.out_dir, cfg)
        self._persist_resolved_config()

    def _persist_resolved_config(self):
        path = os.path.join(self.out_dir, "resolved_config.yaml")
        with atomic_write(path) as tmp:
            with open(tmp, "w", encoding="utf-8") as fh:
                yaml.safe_dump(self.cfg, fh, sort_keys=True)

    def train_cfg(self, section="train", seed=None) -> model.TrainConfig:
        t = self.cfg[section]
        return model.TrainConfig(
            epochs=t["epochs"], batch_size=t["batch_size"],
            initial_lr=t["initial_lr"], eval_every=t["eval_every"],
            seed=self.cfg["seed"] if seed is None else seed)

    def split(self, language_id: str, task: str) -> corpus.DatasetSplit:
        d = self.cfg["data"]
        return corpus.build_split(self.grammar, self.by_id[language_id],
                                  task, d["train_size"], d["valid_size"],
                                  seed=self.cfg["seed"],
                                  sentence_length=d["sentence_length"])

    def path(self, *parts) -> str:
        full = os.path.join(self.out_dir, *parts)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        return full

    def theta0(self) -> model.ParamSet:
        self.manifest.require("pretrain", "pretrain")
        params, _, _ = model.load_checkpoint(self.path("checkpoints",
                                                       "theta0.npz"))
        return params

    def mask_path(self, method, task, language_id, s) -> str:
        return self.path("masks", f"{method}_{task}_{language_id}_"
                                  f"s{s:g}.mask")


def _stage(ws: Workspace, name: str, force=False):
    """Decorator-free stage runner: returns None if the stage may be
    skipped, else a callback that records artifacts."""
    if not force and ws.manifest.up_to_date(name):
        print(f"[{name}] up to date, skipping")
        return None
    start = time.monotonic()

    def done(artifacts):
        ws.manifest.record(name, artifacts, time.monotonic() - start)
        print(f"[{name}] wrote {len(artifacts)} artifact(s)")

    return done


# ---------------------------------------------------------------------------
# commands


def cmd_generate(ws: Workspace, jobs=1) -> None:
    done = _stage(ws, "generate")
    if done is None:
        return
    artifacts = []
    for lang in ws.languages:
        for task in corpus.TASKS:
            split = ws.split(lang.language_id, task)
            path = ws.path("data", f"{task}_{lang.language_id}.jsonl")
            with atomic_write(path) as tmp:
                corpus.export_jsonl(split, tmp)
            artifacts.append(path)
    done(artifacts)


def cmd_pretrain(ws: Workspace, jobs=1) -> None:
    done = _stage(ws, "pretrain")
    if done is None:
        return
    d = ws.cfg["data"]
    mix = corpus.build_pretraining_mix(
        ws.grammar, ws.languages, d["pretrain_per_language"],
        seed=ws.cfg["seed"], valid_per_language=max(d["valid_size"] // 4, 1),
        sentence_length=d["sentence_length"])
    init = model.init_params(ws.model_cfg, ws.cfg["seed"])
    outcome = model.train(init, None, mix, ws.model_cfg,
                          ws.train_cfg("pretrain"))
    path = ws.path("checkpoints", "theta0.npz")
    with atomic_write(path) as tmp:
        model.save_checkpoint(tmp, outcome.final_params, ws.model_cfg,
                              provenance={"stage": "pretrain",
                                          "seed": ws.cfg["seed"],
                                          "metric": outcome.best_metric})
    done([path])


def cmd_prune(ws: Workspace, method: str, task: str, language_ids=None,
              sparsity=None, jobs=1) -> None:
    if method not in ("imp", "diff_init", "fisher"):
        raise ConfigError(f"unknown pruning method {method!r}")
    if task not in corpus.TASKS:
        raise ConfigError(f"unknown task {task!r}")
    s = ws.cfg["pruning"]["sparsity"] if sparsity is None else sparsity
    langs = language_ids or [l.language_id for l in ws.languages]
    stage = f"prune_{method}_{task}_s{s:g}"
    done = _stage(ws, stage)
    if done is None:
        return
    theta0 = ws.theta0()
    rate = ws.cfg["pruning"]["rate"]
    tcfg = ws.train_cfg()

    def one(lid):
        split = ws.split(lid, task)
        trace = None
        if method == "imp":
            sched = pruning.ImpSchedule(s, rate, tcfg)
            mask, trace = pruning.imp(theta0, split, ws.model_cfg, sched)
        elif method == "diff_init":
            mask = pruning.diff_from_init_mask(theta0, split, s,
                                               ws.model_cfg, tcfg)
        else:
            mask = pruning.fisher_mask(
                theta0, split, s, ws.model_cfg,
                sample_count=min(ws.cfg["pruning"]["fisher_samples"],
                                 len(split.train)),
                seed=ws.cfg["seed"])
        # one retrain of the subnet records its quality for the report
        seed = Rng(ws.cfg["seed"]).child("prune-eval", method, lid).next_u64()
        outcome = model.train(theta0, mask, split, ws.model_cfg,
                              replace(tcfg, seed=seed))
        return lid, mask, trace, outcome

    with ThreadPoolExecutor(max_workers=max(jobs, 1)) as pool:
        results = list(pool.map(one, langs))

    artifacts = []
    quality = {}
    for lid, mask, trace, outcome in results:
        path = ws.mask_path(method, task, lid, s)
        with atomic_write(path) as tmp:
            masks.save_mask(mask, tmp)
        artifacts.append(path)
        if trace is not None:
            tpath = ws.path("traces", f"{method}_{task}_{lid}_s{s:g}.jsonl")
            with atomic_write(tpath) as tmp:
                trace.export_jsonl(tmp)
            artifacts.append(tpath)
        quality[lid] = {"metric": outcome.best_metric,
                        "best_step": outcome.best_step,
                        "orientation": outcome.metric_orientation}
    qpath = ws.path("metrics", f"prune_{method}_{task}_s{s:g}.json")
    with atomic_write(qpath) as tmp:
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(quality, fh, indent=2, sort_keys=True)
    artifacts.append(qpath)
    done(artifacts)


def _load_task_masks(ws: Workspace, method, task, s) -> tuple:
    theta0 = ws.theta0()
    out = {}
    for lang in ws.languages:
        path = ws.mask_path(method, task, lang.language_id, s)
        if not os.path.exists(path):
            raise PrerequisiteError(
                f"mask {os.path.relpath(path, ws.out_dir)} is missing; run "
                f"`sublingua prune --method {method} --task {task}` first")
        out[lang.language_id] = masks.load_mask(path, schema_params=theta0)
    return out, theta0


def cmd_transfer(ws: Workspace, task=None, sparsity=None, jobs=1) -> None:
    task = task or ws.cfg["transfer"]["task"]
    s = ws.cfg["transfer"]["sparsity"] if sparsity is None else sparsity
    stage = f"transfer_{task}_s{s:g}"
    done = _stage(ws, stage)
    if done is None:
        return
    lang_masks, theta0 = _load_task_masks(ws, "imp", task, s)
    tcfg = ws.train_cfg()
    splits = {lid: ws.split(lid, task) for lid in lang_masks}

    def baseline(lid):
        return lid, transfer.make_baseline(
            theta0, splits[lid], ws.model_cfg, tcfg,
            seeds=ws.cfg["transfer"]["baseline_seeds"])

    with ThreadPoolExecutor(max_workers=max(jobs, 1)) as pool:
        baselines = dict(pool.map(baseline, sorted(splits)))
    matrix = transfer.cross_language_transfer(theta0, lang_masks, splits,
                                              ws.model_cfg, tcfg, baselines)
    path = ws.path("tables", f"transfer_{task}_s{s:g}.csv")
    with atomic_write(path) as tmp:
        transfer.export_matrix_csv(matrix, tmp)
    done([path])


def cmd_overlap(ws: Workspace, task=None, sparsity=None, jobs=1) -> None:
    task = task or ws.cfg["transfer"]["task"]
    s = ws.cfg["pruning"]["sparsity"] if sparsity is None else sparsity
    stage = f"overlap_{task}_s{s:g}"
    done = _stage(ws, stage)
    if done is None:
        return
    lang_masks, _ = _load_task_masks(ws, "imp", task, s)
    reports = []
    ids = sorted(lang_masks)
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            reports.append(masks.jaccard(lang_masks[a], lang_masks[b],
                                         pair=(a, b)))
    path = ws.path("tables", f"overlap_{task}_s{s:g}.csv")
    with atomic_write(path) as tmp:
        masks.export_overlap_csv(reports, tmp)
    done([path])


def _profile_sentences(ws: Workspace, count: int) -> list:
    rng = Rng(ws.cfg["seed"]).child("profile-sentences")
    length = ws.cfg["data"]["sentence_length"]
    return [corpus.sample_abstract_sentence(ws.grammar, length, rng.child(i))
            for i in range(count)]


def cmd_similarity(ws: Workspace, jobs=1) -> None:
    done = _stage(ws, "similarity")
    if done is None:
        return
    theta0 = ws.theta0()
    sc = ws.cfg["similarity"]
    a, b = (ws.by_id[l] for l in sc["languages"][:2])
    sentences = _profile_sentences(ws, sc["sample_count"])
    rows = []
    for method in ("svcca", "pwcca"):
        profile = similarity.layer_profile(
            theta0, None, ws.model_cfg, ws.grammar, a, b, sentences,
            method=method, variance_threshold=sc["variance_threshold"])
        rows.extend((layer, method, value)
                    for layer, value in enumerate(profile))
    path = ws.path("tables", "similarity_profile.csv")
    with atomic_write(path) as tmp:
        similarity.export_profile_csv(rows, tmp)
    done([path])


def cmd_retrieve(ws: Workspace, jobs=1) -> None:
    done = _stage(ws, "retrieve")
    if done is None:
        return
    theta0 = ws.theta0()
    rc = ws.cfg["retrieval"]
    a, b = (ws.by_id[l] for l in rc["languages"][:2])
    sentences = _profile_sentences(ws, rc["sample_count"])
    toks_a = [corpus.render(s, ws.grammar, a) for s in sentences]
    toks_b = [corpus.render(s, ws.grammar, b) for s in sentences]
    reps_a = similarity.pooled_layer_representations(theta0, None,
                                                     ws.model_cfg, toks_a)
    reps_b = similarity.pooled_layer_representations(theta0, None,
                                                     ws.model_cfg, toks_b)
    layer = rc["layer_index"]
    cfg = similarity.RetrievalConfig(k=rc["k"], layer_index=layer)
    top1, top5, _ = similarity.margin_retrieve(reps_a[layer].T,
                                               reps_b[layer].T, cfg)
    path = ws.path("tables", "retrieval.csv")
    with atomic_write(path) as tmp:
        similarity.export_retrieval_csv([(rc["k"], top1, top5)], tmp)
    done([path])


def cmd_report(ws: Workspace, jobs=1) -> None:
    done = _stage(ws, "report", force=True)
    report = {
        "config_digest": ws.manifest.data["config_digest"],
        "code_version": ws.manifest.data["code_version"],
        # no wall-clock here: the report digest must be deterministic;
        # timings live in the manifest
        "stages": sorted(ws.manifest.data["stages"]),
        "tables": [],
        "pruner_comparison": {},
    }
    tables_dir = os.path.join(ws.out_dir, "tables")
    if os.path.isdir(tables_dir):
        report["tables"] = sorted(os.listdir(tables_dir))
    metrics_dir = os.path.join(ws.out_dir, "metrics")
    if os.path.isdir(metrics_dir):
        for name in sorted(os.listdir(metrics_dir)):
            with open(os.path.join(metrics_dir, name), encoding="utf-8") as fh:
                quality = json.load(fh)
            vals = [v["metric"] for v in quality.values()]
            orient = next(iter(quality.values()))["orientation"]
            report["pruner_comparison"][name[:-len(".json")]] = {
                "seed_mean_metric": float(np.mean(vals)),
                "orientation": orient,
                "per_language": {k: v["metric"] for k, v in quality.items()},
            }
    path = ws.path("report.json")
    with atomic_write(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    done([path])


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sublingua",
        description="Sparse multilingual sub-network experiments.")
    parser.add_argument("--config", help="YAML experiment config")
    parser.add_argument("--seed", type=int, help="override the base seed")
    parser.add_argument("--jobs", type=int, default=1,
                        help="worker pool size for independent jobs")
    parser.add_argument("--output-root",
                        help=f"output root (or ${OUTPUT_ROOT_ENV})")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", help="emit dataset files")
    sub.add_parser("pretrain", help="joint multilingual MLM base checkpoint")
    p = sub.add_parser("prune", help="discover masks")
    p.add_argument("--method", default="imp",
                   choices=["imp", "diff_init", "fisher"])
    p.add_argument("--task", default="tag")
    p.add_argument("--language", action="append", dest="languages")
    p.add_argument("--sparsity", type=float)
    p = sub.add_parser("transfer", help="cross-language transfer matrix")
    p.add_argument("--task")
    p.add_argument("--sparsity", type=float)
    p = sub.add_parser("overlap", help="mask overlap tables")
    p.add_argument("--task")
    p.add_argument("--sparsity", type=float)
    sub.add_parser("similarity", help="per-layer CCA profile")
    sub.add_parser("retrieve", help="margin-based retrieval accuracy")
    sub.add_parser("report", help="consolidated structured report")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed,
                          output_root=args.output_root)
        ws = Workspace(cfg)
        if args.command == "generate":
            cmd_generate(ws, jobs=args.jobs)
        elif args.command == "pretrain":
            cmd_pretrain(ws, jobs=args.jobs)
        elif args.command == "prune":
            cmd_prune(ws, args.method, args.task,
                      language_ids=args.languages, sparsity=args.sparsity,
                      jobs=args.jobs)
        elif args.command == "transfer":
            cmd_transfer(ws, task=args.task, sparsity=args.sparsity,
                         jobs=args.jobs)
        elif args.command == "overlap":
            cmd_overlap(ws, task=args.task, sparsity=args.sparsity,
                        jobs=args.jobs)
        elif args.command == "similarity":
            cmd_similarity(ws, jobs=args.jobs)
        elif args.command == "retrieve":
            cmd_retrieve(ws, jobs=args.jobs)
        elif args.command == "report":
            cmd_report(ws, jobs=args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PrerequisiteError as exc:
        print(f"prerequisite error: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except (NumericalFailure, model.TrainingFailure) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(run())
