"""Command-line entry point tying synthesis, the sweep, baselines, the
change analysis, and tree export into reproducible runs.

Every run writes a manifest.json (subcommand + full config + input/output
digests); replaying a manifest's config on the same inputs reproduces the
outputs byte for byte. Exit codes: 0 success, 2 configuration error (bad
flags, missing files, conflicting inputs), 1 runtime error (degenerate
data and other analysis failures).
"""

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from .dataset import SchemaError, load_cohort_dir
from .pipeline import (DEFAULT_CHANGE_THRESHOLDS, DEFAULT_SCORE_THRESHOLDS,
                       FEATURE_SETS, SweepConfig, run_baselines,
                       run_change_pipeline, run_sweep, save_report_json,
                       write_table3_csv)
from .synth import (CohortSpec, generate_cohort, generate_tables,
                    persistent_effect_spec, write_synthetic_dir)
from .tree import export_tree, tree_from_dict

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """A problem with flags/inputs that prevents the run from starting."""


def _parse_thresholds(spec: str) -> tuple[float, ...]:
    """Either 'start:stop:step' (stop inclusive) or a comma list."""
    try:
        if ":" in spec:
            parts = spec.split(":")
            if len(parts) != 3:
                raise ValueError("expected start:stop:step")
            start, stop, step = (float(p) for p in parts)
            if step <= 0 or stop < start:
                raise ValueError("need step > 0 and stop >= start")
            out = []
            t = start
            while t <= stop + 1e-9:
                out.append(round(t, 9))
                t += step
            return tuple(out)
        return tuple(float(p) for p in spec.split(",") if p)
    except ValueError as exc:
        raise ConfigError(f"bad --thresholds {spec!r}: {exc}") from None


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"--config file {path} does not exist")
    with open(p, encoding="utf-8") as fh:
        data = json.load(fh)
    # A manifest is accepted directly; its embedded config is what replays.
    if "subcommand" in data and "config" in data:
        return data["config"]
    return data


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tutortrees",
        description="Extract interpretable decision trees from random-forest "
                    "sweeps over tutoring-outcome cohorts.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_io(p, cohort_input=True):
        if cohort_input:
            p.add_argument("--cohort", help="directory with sessions.csv, "
                           "its.csv, assessments.csv, roster.csv")
            p.add_argument("--synth-seed", type=int, default=None,
                           help="generate the cohort in-process instead")
            p.add_argument("--persistent-effect", action="store_true",
                           help="use the persistent-effect synthetic preset")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="JSON config file (flags override)")

    def add_sweep(p):
        p.add_argument("--thresholds", help="start:stop:step or comma list")
        p.add_argument("--seeds", type=int, help="forest seeds per threshold")
        p.add_argument("--trees", type=int, help="trees per forest")
        p.add_argument("--max-depth", type=int, help="tree depth limit")
        p.add_argument("--min-leaf", type=int, help="minimum leaf size")
        p.add_argument("--mtry", type=int, help="features sampled per split")
        p.add_argument("--features", choices=sorted(FEATURE_SETS),
                       help="feature set (default combined)")
        p.add_argument("--jobs", type=int, help="worker processes")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--fold-candidates", type=int,
                       help="random partitions scored in the fold search")

    p_synth = sub.add_parser("synth", help="emit a synthetic cohort")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--tutors", type=int, default=None)
    p_synth.add_argument("--noise-sd", type=float, default=None)
    p_synth.add_argument("--persistent-effect", action="store_true")
    add_io(p_synth, cohort_input=False)

    p_run = sub.add_parser("run", help="full sweep -> report + final tree")
    add_io(p_run)
    add_sweep(p_run)

    p_base = sub.add_parser("baselines", help="comparison table (CSV)")
    add_io(p_base)
    add_sweep(p_base)
    p_base.add_argument("--changes", action="store_true",
                        help="also compute the score-change rows")

    p_change = sub.add_parser("change", help="score-change pipeline")
    add_io(p_change)
    add_sweep(p_change)

    p_export = sub.add_parser("export-tree", help="re-render a saved model")
    p_export.add_argument("--model", required=True,
                          help="final_tree.json (or report.json)")
    p_export.add_argument("--format", choices=["dot", "json"], default="dot")
    p_export.add_argument("--out", required=True)
    return parser


def _resolve_sweep_config(args, file_cfg: dict,
                          default_thresholds) -> SweepConfig:
    def pick(flag, key, default):
        v = getattr(args, flag, None)
        if v is not None:
            return v
        return file_cfg.get(key, default)

    thresholds = getattr(args, "thresholds", None)
    if thresholds is not None:
        thresholds = _parse_thresholds(thresholds)
    elif "thresholds" in file_cfg:
        thresholds = tuple(float(t) for t in file_cfg["thresholds"])
    else:
        thresholds = default_thresholds

    try:
        return SweepConfig(
            thresholds=thresholds,
            n_seeds=pick("seeds", "n_seeds", 200),
            n_trees=pick("trees", "n_trees", 10),
            max_depth=pick("max_depth", "max_depth", 2),
            min_leaf=pick("min_leaf", "min_leaf", 5),
            mtry=pick("mtry", "mtry", None),
            master_seed=pick("seed", "master_seed", 0),
            fold_candidates=pick("fold_candidates", "fold_candidates", 1000),
            agreement_on=file_cfg.get("agreement_on", "training"),
            jobs=pick("jobs", "jobs", 1),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _load_cohort(args, file_cfg: dict):
    """Returns (cohort, input description for the manifest)."""
    cohort_dir = args.cohort or file_cfg.get("cohort")
    synth_seed = args.synth_seed
    if synth_seed is None:
        synth_seed = file_cfg.get("synth_seed")
    if (cohort_dir is None) == (synth_seed is None):
        raise ConfigError(
            "exactly one input source required: --cohort DIR xor --synth-seed N")
    if cohort_dir is not None:
        d = Path(cohort_dir)
        names = ["sessions.csv", "its.csv", "assessments.csv", "roster.csv"]
        missing = [n for n in names if not (d / n).exists()]
        if missing:
            raise ConfigError(
                f"cohort directory {d} is missing {', '.join(missing)}")
        cohort = load_cohort_dir(d)
        inputs = {n: _sha256(d / n) for n in names}
        return cohort, {"cohort_dir": str(d), "files": inputs}
    persistent = bool(getattr(args, "persistent_effect", False)
                      or file_cfg.get("persistent_effect", False))
    spec = (persistent_effect_spec(seed=synth_seed) if persistent
            else CohortSpec(seed=synth_seed))
    cohort, _ = __import__("tutortrees.synth", fromlist=["generate_cohort"]) \
        .generate_cohort(spec)
    return cohort, {"synth_seed": synth_seed, "persistent_effect": persistent}


def _prepare_out(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}")
    return out


def _write_manifest(out: Path, subcommand: str, config: dict, inputs: dict,
                    output_names: list[str]) -> None:
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "inputs": inputs,
        "outputs": {name: _sha256(out / name) for name in output_names},
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config_for_manifest(cfg: SweepConfig, extra: dict | None = None) -> dict:
    d = {
        "thresholds": list(cfg.thresholds),
        "n_seeds": cfg.n_seeds,
        "n_trees": cfg.n_trees,
        "max_depth": cfg.max_depth,
        "min_leaf": cfg.min_leaf,
        "mtry": cfg.mtry,
        "bootstrap": cfg.bootstrap,
        "master_seed": cfg.master_seed,
        "fold_candidates": cfg.fold_candidates,
        "agreement_on": cfg.agreement_on,
        "jobs": cfg.jobs,
    }
    if extra:
        d.update(extra)
    return d


def _cmd_synth(args) -> int:
    file_cfg = _load_config_file(args.config)
    out = _prepare_out(args)
    seed = args.seed if args.seed is not None else file_cfg.get("seed", 0)
    persistent = args.persistent_effect or file_cfg.get("persistent_effect",
                                                        False)
    overrides = {}
    if args.tutors is not None:
        overrides["n_tutors"] = args.tutors
    if args.noise_sd is not None:
        overrides["noise_sd"] = args.noise_sd
    spec = (persistent_effect_spec(seed=seed, **overrides) if persistent
            else CohortSpec(seed=seed, **overrides))
    tables = generate_tables(spec)
    write_synthetic_dir(tables, out)
    names = ["sessions.csv", "its.csv", "assessments.csv", "roster.csv",
             "planted_rule.json"]
    _write_manifest(out, "synth",
                    {"seed": seed, "persistent_effect": persistent,
                     **overrides}, {}, names)
    print(f"wrote synthetic cohort ({spec.n_students} students, "
          f"{spec.n_tutors} tutors) to {out}")
    return 0


def _run_and_write(args, change: bool) -> int:
    file_cfg = _load_config_file(args.config)
    out = _prepare_out(args)
    defaults = DEFAULT_CHANGE_THRESHOLDS if change else DEFAULT_SCORE_THRESHOLDS
    cfg = _resolve_sweep_config(args, file_cfg, defaults)
    feature_set = args.features or file_cfg.get("features", "combined")
    cohort, inputs = _load_cohort(args, file_cfg)

    if change:
        report = run_change_pipeline(cohort, cfg, feature_set=feature_set)
    else:
        report = run_sweep(cohort, cfg, feature_set=feature_set)

    save_report_json(report, out / "report.json")
    names = list(report.feature_names)
    with open(out / "final_tree.dot", "w", encoding="utf-8") as fh:
        fh.write(export_tree(report.whole_dataset_tree, names, "dot"))
    with open(out / "final_tree.json", "w", encoding="utf-8") as fh:
        json.dump({"feature_names": names,
                   "tree": json.loads(
                       export_tree(report.whole_dataset_tree, names, "json"))},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")

    subcommand = "change" if change else "run"
    _write_manifest(out, subcommand,
                    _config_for_manifest(cfg, {"features": feature_set,
                                               "change": change}),
                    inputs,
                    ["report.json", "final_tree.dot", "final_tree.json"])
    print(f"{subcommand}: mean test AUC {report.mean_test_auc:.3f}, "
          f"whole-dataset AUC {report.whole_dataset_auc:.3f} "
          f"(threshold {report.final_model.threshold:g}, "
          f"fold {report.final_model.fold}) -> {out}")
    return 0


def _cmd_baselines(args) -> int:
    file_cfg = _load_config_file(args.config)
    out = _prepare_out(args)
    cfg = _resolve_sweep_config(args, file_cfg, DEFAULT_SCORE_THRESHOLDS)
    cohort, inputs = _load_cohort(args, file_cfg)

    tables = {"scores": run_baselines(cohort, cfg)}
    if args.changes or file_cfg.get("changes", False):
        from .dataset import compute_score_changes
        change_cfg = _resolve_sweep_config(args, file_cfg,
                                           DEFAULT_CHANGE_THRESHOLDS)
        if args.thresholds is None and "thresholds" not in file_cfg:
            tables["changes"] = run_baselines(compute_score_changes(cohort),
                                              change_cfg)
        else:
            tables["changes"] = run_baselines(compute_score_changes(cohort),
                                              change_cfg)

    write_table3_csv(tables, out / "table3.csv")
    with open(out / "baselines.json", "w", encoding="utf-8") as fh:
        json.dump({k: t.to_dict() for k, t in sorted(tables.items())},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "baselines",
                    _config_for_manifest(cfg, {"changes": "changes" in tables}),
                    inputs, ["table3.csv", "baselines.json"])
    for outcome, table in sorted(tables.items()):
        for fs in table.feature_sets:
            cells = ", ".join(f"{m}={table.mean_auc(fs, m):.3f}"
                              for m in table.methods)
            print(f"{outcome}/{fs}: {cells}")
    return 0


def _cmd_export_tree(args) -> int:
    model_path = Path(args.model)
    if not model_path.exists():
        raise ConfigError(f"model file {model_path} does not exist")
    with open(model_path, encoding="utf-8") as fh:
        data = json.load(fh)
    if "final_model" in data:  # a report.json
        names = data["feature_names"]
        tree_dict = data["final_model"]["tree"]
    elif "tree" in data:  # a final_tree.json
        names = data["feature_names"]
        tree_dict = data["tree"]
    else:
        raise ConfigError(f"{model_path} holds neither a report nor a tree")
    tree = tree_from_dict(tree_dict, list(names))
    out = _prepare_out(args)
    suffix = "dot" if args.format == "dot" else "json"
    target = out / f"tree.{suffix}"
    with open(target, "w", encoding="utf-8") as fh:
        fh.write(export_tree(tree, list(names), args.format))
    print(f"rendered {model_path} -> {target}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.subcommand == "synth":
            return _cmd_synth(args)
        if args.subcommand == "run":
            return _run_and_write(args, change=False)
        if args.subcommand == "change":
            return _run_and_write(args, change=True)
        if args.subcommand == "baselines":
            return _cmd_baselines(args)
        if args.subcommand == "export-tree":
            return _cmd_export_tree(args)
        raise AssertionError(args.subcommand)
    except (ConfigError, SchemaError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
