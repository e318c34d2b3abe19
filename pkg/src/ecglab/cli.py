"""Command-line pipeline over a run directory.

Layout::

    RUN/manifest.json
    RUN/inputs/     copies of the ECG and lab tables
    RUN/datasets/   one CSV per task plus tasks.csv
    RUN/splits/     assignment.csv, retained.csv
    RUN/models/     one model file per retained task
    RUN/reports/    eval log, tables, subgroup and attribution outputs

Every stage records its parameters and the sha256 of its inputs and
outputs in the manifest; rerunning a stage whose record still matches is
a no-op, which makes interrupted runs resumable.
"""

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__, cohort, evaluation, explain, gbdt, ingest, split, synth
from .errors import ConfigInvalid, EcgLabError, StageInputMissing

log = logging.getLogger("ecglab.cli")

MANIFEST = "manifest.json"
SUBDIRS = ("inputs", "datasets", "splits", "models", "reports")

# flag dest -> (config section, key, type, default)
SETTINGS = {
    "horizon_s": ("cohort", "horizon_s", float, cohort.DEFAULT_HORIZON_S),
    "boundary_positive": ("cohort", "boundary_positive", bool, False),
    "seed": ("split", "seed", int, 0),
    "split_file": ("split", "split_file", str, None),
    "min_per_class": ("split", "min_per_class", int, 10),
    "rounds": ("train", "rounds", int, 200),
    "learning_rate": ("train", "learning_rate", float, 0.1),
    "lambda_l2": ("train", "lambda", float, 1.0),
    "min_child_hessian": ("train", "min_child_hessian", float, 1.0),
    "early_stopping": ("train", "early_stopping_rounds", int, 20),
    "max_bins": ("train", "max_bins", int, 256),
    "exact": ("train", "exact", bool, False),
    "bootstrap_n": ("eval", "bootstrap_n", int, evaluation.DEFAULT_BOOTSTRAP_N),
    "auroc_floor": ("eval", "auroc_floor", float, evaluation.DEFAULT_AUROC_FLOOR),
    "background_n": ("explain", "background_n", int, explain.DEFAULT_BACKGROUND_N),
    "jobs": ("run", "jobs", int, None),
}


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# -- run directory -------------------------------------------------------------

class Run:
    def __init__(self, root):
        self.root = Path(root)
        self.path = self.root / MANIFEST
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                self.manifest = json.load(fh)
        else:
            self.manifest = {
                "run_id": None,
                "tool_version": __version__,
                "config": {},
                "inputs": {},
                "stages": {},
            }

    def init(self):
        for sub in SUBDIRS:
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def save(self):
        self.init()
        tmp = self.path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, self.path)

    def rel(self, path):
        return str(Path(path).relative_to(self.root))

    def require(self, *relpaths):
        for rp in relpaths:
            if not (self.root / rp).exists():
                raise StageInputMissing(f"{self.root / rp} not found; run the earlier stage first")

    def stage(self, name, params, inputs, action):
        """Run ``action`` unless the recorded stage matches params, inputs and outputs.

        ``inputs`` are paths relative to the run root; ``action`` returns the
        output paths. Returns True when the action ran.
        """
        self.require(*inputs)
        digests = {rp: sha256_file(self.root / rp) for rp in inputs}
        rec = self.manifest["stages"].get(name)
        if rec and rec.get("status") == "done" and rec["params"] == params and rec["inputs"] == digests:
            outs = rec["outputs"]
            if all((self.root / rp).exists() and sha256_file(self.root / rp) == d for rp, d in outs.items()):
                log.info("[skip] %s", name)
                return False
        self.manifest["stages"][name] = {"status": "running", "params": params, "inputs": digests, "outputs": {}}
        self.save()
        outputs = action()
        self.manifest["stages"][name] = {
            "status": "done",
            "params": params,
            "inputs": digests,
            "outputs": {self.rel(p): sha256_file(p) for p in outputs},
        }
        self.save()
        log.info("[done] %s", name)
        return True

    def tasks(self):
        self.require("datasets/tasks.csv")
        return {spec.key: spec for spec, _, _ in cohort.read_task_manifest(self.root / "datasets/tasks.csv")}

    def retained(self):
        self.require("splits/retained.csv")
        with open(self.root / "splits/retained.csv", newline="", encoding="utf-8") as fh:
            return [row["key"] for row in csv.DictReader(fh) if row["retained"] == "1"]

    def dataset(self, key):
        return cohort.read_task_dataset(self.root / f"datasets/{key}.csv", self.tasks()[key])

    def assignment(self):
        self.require("splits/assignment.csv")
        return split.load_assignment(self.root / "splits/assignment.csv")

    def folds(self, key):
        return split.apply_assignment(self.dataset(key), self.assignment())


# -- settings ------------------------------------------------------------------

def _read_config(path):
    if not path:
        return {}
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigInvalid(f"cannot read config file {path}")
    return {s: dict(parser[s]) for s in parser.sections()}


def resolve(args, dest):
    """Flag value, else config-file value, else the built-in default."""
    section, key, typ, default = SETTINGS[dest]
    value = getattr(args, dest, None)
    if value is not None:
        return value
    raw = args.config_values.get(section, {}).get(key)
    if raw is None:
        return default
    try:
        if typ is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return typ(raw)
    except ValueError:
        raise ConfigInvalid(f"[{section}] {key} = {raw!r} is not a valid {typ.__name__}") from None


def train_config(args):
    es = resolve(args, "early_stopping")
    try:
        return gbdt.TrainConfig(
            num_rounds=resolve(args, "rounds"),
            learning_rate=resolve(args, "learning_rate"),
            lambda_l2=resolve(args, "lambda_l2"),
            min_child_hessian=resolve(args, "min_child_hessian"),
            early_stopping_rounds=es if es and es > 0 else None,
            max_bins=resolve(args, "max_bins"),
            seed=resolve(args, "seed"),
            exact=resolve(args, "exact"),
        )
    except ValueError as exc:
        raise ConfigInvalid(str(exc)) from None


def _jobs(args):
    jobs = resolve(args, "jobs")
    return jobs if jobs and jobs > 0 else (os.cpu_count() or 1)


def _map(fn, items, jobs):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def _task_keys(run, args):
    keys = run.retained()
    if getattr(args, "task", None):
        unknown = set(args.task) - set(run.tasks())
        if unknown:
            raise ConfigInvalid(f"unknown task(s): {', '.join(sorted(unknown))}")
        keys = [k for k in keys if k in args.task] or list(args.task)
    return keys


# -- commands ------------------------------------------------------------------

def cmd_synth(args):
    config = synth.load_config(args.config) if args.config else synth.SynthConfig()
    if args.seed is not None:
        config = synth.with_seed(config, args.seed)
    if args.n_subjects is not None:
        config = replace(config, n_subjects=args.n_subjects)
    result = synth.generate(config, args.out)
    print(f"wrote {result.ecg_path}, {result.lab_path}, {result.manifest_path}")


def cmd_build_cohort(args):
    run = Run(args.run)
    run.init()
    for label, src in (("ecg", args.ecg), ("labs", args.labs)):
        if src:
            if not Path(src).exists():
                raise StageInputMissing(f"{src} not found")
            dst = run.root / "inputs" / f"{label}.csv"
            if not dst.exists() or sha256_file(dst) != sha256_file(src):
                shutil.copyfile(src, dst)
            run.manifest["inputs"][label] = {"source": str(src), "sha256": sha256_file(dst)}
    run.require("inputs/ecg.csv", "inputs/labs.csv")
    if run.manifest["run_id"] is None:
        joined = run.manifest["inputs"]["ecg"]["sha256"] + run.manifest["inputs"]["labs"]["sha256"]
        run.manifest["run_id"] = hashlib.sha256(joined.encode()).hexdigest()[:12]
    horizon = resolve(args, "horizon_s")
    boundary_positive = resolve(args, "boundary_positive")
    delimiter = "\t" if args.delimiter == "tab" else ","
    run.manifest["config"]["cohort"] = {"horizon_s": horizon, "boundary_positive": boundary_positive}

    def action():
        ecgs = ingest.load_ecg_table(run.root / "inputs/ecg.csv", delimiter=delimiter)
        labs = ingest.load_lab_table(run.root / "inputs/labs.csv", delimiter=delimiter)
        datasets = cohort.build_cohort(ecgs, labs, horizon, boundary_positive=boundary_positive)
        outputs = []
        for ds in datasets:
            path = run.root / f"datasets/{ds.task.key}.csv"
            cohort.write_task_dataset(ds, path)
            outputs.append(path)
        cohort.write_task_manifest(datasets, run.root / "datasets/tasks.csv")
        print(f"{len(datasets)} task datasets from {len(ecgs)} ECGs and {len(labs)} lab observations")
        return outputs + [run.root / "datasets/tasks.csv"]

    run.stage("cohort", {"horizon_s": horizon, "boundary_positive": boundary_positive,
                         "delimiter": args.delimiter}, ["inputs/ecg.csv", "inputs/labs.csv"], action)


def cmd_split(args):
    run = Run(args.run)
    keys = list(run.tasks())
    seed = resolve(args, "seed")
    split_file = resolve(args, "split_file")
    min_per_class = resolve(args, "min_per_class")
    inputs = ["datasets/tasks.csv"] + [f"datasets/{k}.csv" for k in keys]
    params = {"seed": seed, "min_per_class": min_per_class, "split_file": None}
    if split_file:
        if not Path(split_file).exists():
            raise StageInputMissing(f"{split_file} not found")
        shutil.copyfile(split_file, run.root / "inputs/split.csv")
        inputs.append("inputs/split.csv")
        params["split_file"] = "inputs/split.csv"
    run.manifest["config"]["split"] = params

    def action():
        datasets = [run.dataset(k) for k in keys]
        if split_file:
            assignment = split.load_assignment(run.root / "inputs/split.csv", seed)
        else:
            assignment = split.stratified_group_split(datasets, seed)
        split.save_assignment(assignment, run.root / "splits/assignment.csv")
        kept = {ds.task.key for ds in cohort.filter_tasks(datasets, assignment, min_per_class)}
        with open(run.root / "splits/retained.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["key", "retained", "train_pos", "train_neg", "validation_pos",
                             "validation_neg", "test_pos", "test_neg"])
            for ds in datasets:
                counts = cohort.class_counts_by_fold(ds, assignment)
                retained = int(ds.task.key in kept)
                writer.writerow([ds.task.key, retained] + [c for f in split.FOLDS for c in counts[f]])
        print(f"{len(kept)} of {len(datasets)} tasks meet {min_per_class} cases per class per fold")
        return [run.root / "splits/assignment.csv", run.root / "splits/retained.csv"]

    run.stage("split", params, inputs, action)


def _train_one(job):
    root, key, config_dict = job
    run = Run(root)
    tr, va, _ = run.folds(key)
    model = gbdt.train(tr, va, gbdt.TrainConfig(**config_dict))
    path = run.root / f"models/{key}.model"
    gbdt.save_model(model, path)
    return key, len(model.stumps)


def cmd_train(args):
    run = Run(args.run)
    config = train_config(args)
    cfg = asdict(config)
    run.manifest["config"]["train"] = cfg
    run.save()
    keys = _task_keys(run, args)
    todo = []
    for key in keys:
        inputs = [f"datasets/{key}.csv", "splits/assignment.csv"]
        rec = run.manifest["stages"].get(f"train:{key}")
        # cheap pre-check so only stale tasks go to the worker pool
        if _stage_current(run, rec, cfg, inputs):
            log.info("[skip] train:%s", key)
        else:
            todo.append(key)
    for key, n in _map(_train_one, [(str(run.root), k, cfg) for k in todo], _jobs(args)):
        print(f"trained {key}: {n} stumps")
    for key in todo:
        path = run.root / f"models/{key}.model"
        run.stage(f"train:{key}", cfg, [f"datasets/{key}.csv", "splits/assignment.csv"], lambda p=path: [p])


def _stage_current(run, rec, params, inputs):
    if not rec or rec.get("status") != "done" or rec["params"] != params:
        return False
    for rp in inputs:
        if not (run.root / rp).exists() or rec["inputs"].get(rp) != sha256_file(run.root / rp):
            return False
    return all((run.root / rp).exists() and sha256_file(run.root / rp) == d for rp, d in rec["outputs"].items())


def _eval_one(job):
    root, key, bootstrap_n, seed = job
    run = Run(root)
    _, _, te = run.folds(key)
    model = gbdt.load_model(run.root / f"models/{key}.model")
    report = evaluation.evaluate_task(model, te, bootstrap_n, seed)
    path = run.root / f"reports/eval/{key}.csv"
    evaluation.write_eval_log([report], path)
    return key


def cmd_eval(args):
    run = Run(args.run)
    bootstrap_n = resolve(args, "bootstrap_n")
    seed = resolve(args, "seed")
    params = {"bootstrap_n": bootstrap_n, "seed": seed}
    run.manifest["config"]["eval"] = params
    (run.root / "reports/eval").mkdir(parents=True, exist_ok=True)
    keys = _task_keys(run, args)
    inputs_of = {k: [f"datasets/{k}.csv", "splits/assignment.csv", f"models/{k}.model"] for k in keys}
    for k in keys:
        run.require(*inputs_of[k])
    todo = [k for k in keys if not _stage_current(run, run.manifest["stages"].get(f"eval:{k}"), params, inputs_of[k])]
    _map(_eval_one, [(str(run.root), k, bootstrap_n, seed) for k in todo], _jobs(args))
    for k in keys:
        path = run.root / f"reports/eval/{k}.csv"
        run.stage(f"eval:{k}", params, inputs_of[k], lambda p=path: [p])
    reports = [r for k in sorted(run.retained()) if (run.root / f"reports/eval/{k}.csv").exists()
               for r in evaluation.read_eval_log(run.root / f"reports/eval/{k}.csv")]
    evaluation.write_eval_log(reports, run.root / "reports/eval_log.csv")
    for r in reports:
        print(f"{r.task.key}: AUROC {r.auroc:.3f} ({r.ci_low:.3f}, {r.ci_high:.3f}) n={r.n_samples} [{r.n_positive}]")


def cmd_report(args):
    run = Run(args.run)
    floor = resolve(args, "auroc_floor")
    run.require("reports/eval_log.csv")
    reports = evaluation.read_eval_log(run.root / "reports/eval_log.csv")
    rows = evaluation.build_report_table(reports, floor)
    evaluation.write_rows_csv(rows, run.root / "reports/summary.csv")
    text = evaluation.format_table(rows, title=f"Tasks with AUROC > {floor:.2f}")
    if reports:
        text += f"\nmacro AUROC over {len(reports)} tasks: {evaluation.macro_auroc(reports):.3f}\n"
    with open(run.root / "reports/summary.txt", "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")


def _parse_downsample(spec):
    parts = spec.split(":")
    if len(parts) != 3:
        raise ConfigInvalid(f"--downsample expects CATEGORY:SOURCE:TARGET, got {spec!r}")
    return parts


def cmd_subgroups(args):
    run = Run(args.run)
    bootstrap_n = resolve(args, "bootstrap_n")
    seed = resolve(args, "seed")
    categories = list(evaluation.GROUPS) if args.category == "all" else [args.category]
    for key in _task_keys(run, args):
        tr, va, te = run.folds(key)
        model = gbdt.load_model(run.root / f"models/{key}.model")
        variants = [("", model)]
        if args.downsample:
            cat, src, tgt = _parse_downsample(args.downsample)
            small = evaluation.downsample_train_group(tr, cat, src, tgt, seed)
            cfg = run.manifest["config"].get("train")
            retrained = gbdt.train(small, va, gbdt.TrainConfig(**cfg) if cfg else train_config(args))
            variants.append((f"_downsampled_{cat}_{src}_to_{tgt}".lower(), retrained))
        for suffix, m in variants:
            text = ""
            all_reports = []
            for category in categories:
                reports = evaluation.subgroup_eval(m, te, category, bootstrap_n, seed)
                all_reports.extend(reports)
                text += evaluation.format_table(
                    evaluation.subgroup_rows(reports), evaluation.SUBGROUP_COLUMNS, title=category.capitalize())
                text += "\n"
            stem = run.root / f"reports/subgroups_{key}{suffix}"
            evaluation.write_subgroup_csv(all_reports, stem.with_suffix(".csv"))
            with open(stem.with_suffix(".txt"), "w", encoding="utf-8") as fh:
                fh.write(text)
            print(f"== {key}{suffix}\n{text}", end="")


def cmd_explain(args):
    run = Run(args.run)
    background_n = resolve(args, "background_n")
    seed = resolve(args, "seed")
    for key in _task_keys(run, args):
        tr, va, te = run.folds(key)
        data = {"train": tr, "validation": va, "test": te}[args.fold]
        model = gbdt.load_model(run.root / f"models/{key}.model")
        background = explain.sample_background(tr, background_n, seed)
        attributions = explain.explain_dataset(model, data, background)
        with open(run.root / f"reports/attributions_{key}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["record_id", "base_value", "margin"] + list(model.feature_names))
            for a in attributions:
                writer.writerow([a.record_id, repr(a.base_value), repr(a.margin)]
                                + [repr(float(c)) for c in a.contributions])
        importance = explain.global_importance(model, data, background)
        rows = importance.as_rows()
        evaluation.write_rows_csv([(n, repr(v)) for n, v in rows],
                                  run.root / f"reports/importance_{key}.csv", ("feature", "mean_abs_contribution"))
        print(f"== {key}: global importance (mean |contribution|, log-odds)")
        for name, value in rows:
            if value > 0:
                print(f"  {name:<16}{value:.4f}")


def cmd_run(args):
    cmd_build_cohort(args)
    cmd_split(args)
    cmd_train(args)
    cmd_eval(args)
    cmd_report(args)


# -- argument parsing ---------------------------------------------------------

def _add_common(p, *groups):
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--config", help="INI config; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="worker processes (default: all cores)")
    if "cohort" in groups:
        p.add_argument("--ecg", help="ECG table")
        p.add_argument("--labs", help="lab table")
        p.add_argument("--horizon-s", dest="horizon_s", type=float)
        p.add_argument("--boundary-positive", dest="boundary_positive", action="store_const", const=True,
                       help="label values equal to the threshold as abnormal")
        p.add_argument("--delimiter", choices=("comma", "tab"), default="comma")
    if "split" in groups:
        p.add_argument("--split-file", dest="split_file", help="subject_id,fold CSV to use instead of splitting")
        p.add_argument("--min-per-class", dest="min_per_class", type=int)
    if "train" in groups:
        p.add_argument("--rounds", type=int)
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--lambda", dest="lambda_l2", type=float)
        p.add_argument("--min-child-hessian", dest="min_child_hessian", type=float)
        p.add_argument("--early-stopping", dest="early_stopping", type=int, help="0 disables")
        p.add_argument("--max-bins", dest="max_bins", type=int)
        p.add_argument("--exact", action="store_const", const=True, help="exact split finding")
    if "eval" in groups:
        p.add_argument("--bootstrap-n", dest="bootstrap_n", type=int)
    if "report" in groups:
        p.add_argument("--auroc-floor", dest="auroc_floor", type=float)
    if "task" in groups:
        p.add_argument("--task", action="append", help="task key, repeatable (default: all retained)")


def build_parser():
    parser = argparse.ArgumentParser(prog="ecglab", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--config", help="INI file with [cohort] and [analyte:<name>] sections")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-subjects", dest="n_subjects", type=int)
    p.set_defaults(func=cmd_synth)

    for name, func, groups, help_ in (
        ("build-cohort", cmd_build_cohort, ("cohort",), "pair ECGs with labs and label tasks"),
        ("split", cmd_split, ("split",), "assign subjects to folds and filter tasks"),
        ("train", cmd_train, ("train", "task"), "train one model per retained task"),
        ("eval", cmd_eval, ("eval", "task"), "AUROC with bootstrap CIs on the test fold"),
        ("report", cmd_report, ("report",), "tabulate tasks above the AUROC floor"),
        ("run", cmd_run, ("cohort", "split", "train", "eval", "report"), "all of the above"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_common(p, *groups)
        p.set_defaults(func=func)

    p = sub.add_parser("subgroups", help="per-demographic AUROC, optional downsampling retrain")
    _add_common(p, "eval", "train", "task")
    p.add_argument("--category", default="all", choices=("all", "gender", "race", "age"))
    p.add_argument("--downsample", help="CATEGORY:SOURCE:TARGET, e.g. race:caucasian:asian")
    p.set_defaults(func=cmd_subgroups)

    p = sub.add_parser("explain", help="Shapley attributions and global importance")
    _add_common(p, "task")
    p.add_argument("--background-n", dest="background_n", type=int)
    p.add_argument("--fold", choices=("train", "validation", "test"), default="test")
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        args.config_values = _read_config(getattr(args, "config", None)) if args.command != "synth" else {}
        args.func(args)
    except EcgLabError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
