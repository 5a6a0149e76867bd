"""Command-line entry point: ``jade {import-mnist,synth,train,eval,diagnose}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from jade import data as D
from jade.config import ExperimentConfig, load_experiment
from jade.evaluation import aggregate_runs, emit_report, error_rate, latent_variance_profile
from jade.training import (
    NonFiniteLossError,
    TrainConfig,
    configure_determinism,
    load_checkpoint,
    objective_trace,
    run_training,
    save_checkpoint,
)

log = logging.getLogger("jade")


class UsageError(Exception):
    pass


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key=value experiment configuration file")
    p.add_argument("--out-dir", help="directory for every output of the command")
    p.add_argument("--seed", type=int, help="base seed for all seed streams")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--parallel-runs", type=int, help="independent runs to execute concurrently")
    return p


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="jade", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("import-mnist", parents=[common], help="convert IDX files to containers")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--test-images")
    p.add_argument("--test-labels")
    p.add_argument("--name", default="mnist")

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic two-domain dataset")
    p.add_argument("--n-per-class", type=_positive, default=1000, help="primary examples per class and split")
    p.add_argument("--n-per-class-aux", type=_positive, default=5000, help="auxiliary examples per class and split")

    p = sub.add_parser("train", parents=[common], help="train one or more modes over run_count runs")
    p.add_argument("--mode", help="single, paired, jade, or a comma-separated list")
    p.add_argument("--epochs", type=int)
    p.add_argument("--run-count", type=int)
    p.add_argument("--manifest")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")

    for name, helptext in (("eval", "error rates of a checkpoint"), ("diagnose", "latent variance profiles")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest")
        p.add_argument("--dataset", help="dataset name in the manifest")
        p.add_argument("--container", help="container file (instead of --manifest/--dataset)")
        p.add_argument("--domain", choices=("primary", "auxiliary"), default="primary")
        if name == "eval":
            p.add_argument("--split", action="append", choices=D.SPLITS, help="repeatable; default test")
        else:
            p.add_argument("--split", choices=D.SPLITS, default="test")
            p.add_argument("--fixed-class", type=int, action="append", default=[], metavar="K")
            p.add_argument("--all-classes", action="store_true", help="one fixed-class profile per class")
            p.add_argument("--random", action="store_true", help="profile over all classes")
            p.add_argument("--n", type=_positive, default=500)
    return parser


def _out_dir(args, default: str) -> Path:
    out = Path(args.out_dir or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- import-mnist / synth ------------------------------------------------------


def cmd_import_mnist(args) -> int:
    pairs = [("train", args.images, args.labels)]
    if args.test_images or args.test_labels:
        if not (args.test_images and args.test_labels):
            raise UsageError("--test-images and --test-labels go together")
        pairs.append(("test", args.test_images, args.test_labels))
    for _, images, labels in pairs:
        for path in (images, labels):
            if not Path(path).is_file():
                raise UsageError(f"no such file: {path}")
    # parse everything before writing anything
    containers = [D.import_mnist_idx(i, l, args.name, split) for split, i, l in pairs]
    out = _out_dir(args, ".")
    entries = []
    for c in containers:
        path = D.save_container(c, out / f"{c.name}_{c.split}.jadc")
        entries.append(D.ManifestEntry(c.name, c.split, path))
        log.info("wrote %s (%d examples)", path, len(c))
    D.merge_manifest(out / "manifest.txt", entries)
    return 0


def cmd_synth(args) -> int:
    cfg = D.SynthConfig(args.n_per_class, args.n_per_class_aux, seed=args.seed or 0)
    pair = D.generate_synthetic_pair(cfg)
    out = _out_dir(args, ".")
    entries, lines = [], []
    for c in pair.containers():
        path = D.save_container(c, out / f"{c.name}_{c.split}.jadc")
        entries.append(D.ManifestEntry(c.name, c.split, path))
        err = D.nearest_template_error(c)
        lines.append(f"{c.name} {c.split} n={len(c)} nearest_template_error={err!r}\n")
        log.info("wrote %s (%d examples, template-oracle error %.4f)", path, len(c), err)
    D.merge_manifest(out / "manifest.txt", entries)
    (out / "synth_oracle.txt").write_text("".join(lines))
    return 0


# --- train -------------------------------------------------------------------


def _experiment(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for key, value in (("mode", args.mode), ("epochs", args.epochs), ("run_count", args.run_count),
                       ("manifest", args.manifest), ("out_dir", args.out_dir),
                       ("parallel_runs", args.parallel_runs)):
        if value is not None:
            overrides[key] = str(value)
    if args.deterministic is not None:
        overrides["deterministic"] = "true" if args.deterministic else "false"
    if args.seed is not None:
        for key in ("seed_params", "seed_data", "seed_noise", "subset_seed"):
            overrides[key] = str(args.seed)
    try:
        return load_experiment(args.config, overrides)
    except (ValueError, OSError) as err:
        raise UsageError(f"invalid configuration: {err}") from err


def _datasets(exp: ExperimentConfig) -> dict[tuple[str, str], D.DatasetContainer]:
    """Resolve and load every container the experiment needs; fails before any training."""
    if not exp.manifest:
        raise UsageError("a manifest is required (manifest=... or --manifest)")
    manifest = Path(exp.manifest)
    if not manifest.is_file():
        raise UsageError(f"manifest not found: {manifest}")
    entries = {(e.name, e.split): e for e in D.read_manifest(manifest)}
    needed = [(exp.primary, "train"), (exp.primary, "test")]
    if any(m != "single" for m in exp.modes):
        needed.append((exp.auxiliary, "train"))
        if exp.evaluate_auxiliary and (exp.auxiliary, "test") in entries:
            needed.append((exp.auxiliary, "test"))
    for key in needed:
        if key not in entries:
            raise UsageError(f"manifest {manifest} has no entry name={key[0]} split={key[1]}")
        if not entries[key].path.is_file():
            raise UsageError(f"container missing: {entries[key].path}")
    return {key: D.load_container(entries[key].path, *key) for key in needed}


def _run_one(exp: ExperimentConfig, mode: str, run: int, datasets, run_dir: Path, stream=None) -> dict:
    cfg = exp.train_config(mode, run)
    primary = datasets[(exp.primary, "train")]
    if exp.n_per_class:
        primary = D.subsample_per_class(primary, exp.n_per_class, exp.subset_seed_for(run))
    auxiliary = datasets.get((exp.auxiliary, "train"))
    eval_sets = [("primary", datasets[(exp.primary, "test")])]
    if mode != "single" and (exp.auxiliary, "test") in datasets:
        eval_sets.append(("auxiliary", datasets[(exp.auxiliary, "test")]))

    run_dir.mkdir(parents=True, exist_ok=True)
    resolved = dataclasses.replace(exp, train=cfg, modes=(mode,), run_count=1,
                                   subset_seed=exp.subset_seed_for(run), out_dir=str(run_dir))
    (run_dir / "config.txt").write_text(resolved.to_text())
    records = []

    def on_record(record):
        record = {"mode": mode, "run": run, **record}
        records.append(record)
        if stream is not None:
            stream.write(json.dumps(record, sort_keys=True) + "\n")
            stream.flush()

    state = run_training(cfg, primary, auxiliary if mode != "single" else None, eval_sets, on_record=on_record)
    save_checkpoint(state, run_dir / "checkpoint.jadk")
    (run_dir / "history.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in state.history))
    reports = [error_rate(state.bundle, c, domain=d) for d, c in eval_sets]
    emit_report(reports, {}, [], run_dir, figures=False)
    from jade.plotting import plot_objective

    trace = objective_trace(state.history)
    if trace.size:
        plot_objective(trace, run_dir / "objective.png")
    return {"mode": mode, "run": run, "records": records,
            "errors": {(r.domain, r.dataset): r.error_rate for r in reports}}


def _run_task(task) -> dict:
    exp, mode, run, run_dir = task
    configure_determinism(exp.train.deterministic)
    datasets = _datasets(exp)
    return _run_one(exp, mode, run, datasets, run_dir)


def cmd_train(args) -> int:
    exp = _experiment(args)
    datasets = _datasets(exp)
    configure_determinism(exp.train.deterministic)
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(exp.to_text())
    tasks = [(mode, run) for mode in exp.modes for run in range(exp.run_count)]
    results = []
    with open(out / "metrics.jsonl", "w") as stream:
        if exp.parallel_runs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=exp.parallel_runs) as pool:
                futures = [pool.submit(_run_task, (exp, m, r, out / m / f"run{r}")) for m, r in tasks]
                for fut in futures:
                    res = fut.result()
                    for rec in res["records"]:
                        stream.write(json.dumps(rec, sort_keys=True) + "\n")
                    results.append(res)
        else:
            for mode, run in tasks:
                log.info("training %s run %d", mode, run)
                results.append(_run_one(exp, mode, run, datasets, out / mode / f"run{run}", stream))

    aggregates, lines = {}, []
    primary_n = exp.n_per_class * 10 if exp.n_per_class else len(datasets[(exp.primary, "train")])
    aux_train = datasets.get((exp.auxiliary, "train"))
    for mode in exp.modes:
        per_key = {}
        for res in results:
            if res["mode"] == mode:
                for key, err in res["errors"].items():
                    per_key.setdefault(key, []).append(err)
        for (domain, dataset), errs in per_key.items():
            n = primary_n if domain == "primary" else len(aux_train)
            column = f"{dataset} ({n} samples)"
            lines.append(f"{mode} {domain} {dataset} " + " ".join(repr(e) for e in errs) + "\n")
            if len(errs) >= 2:
                aggregates.setdefault(mode, {})[column] = aggregate_runs(errs)
    (out / "run_errors.txt").write_text("".join(lines))
    emit_report([], aggregates, [], out)
    return 0


# --- eval / diagnose -----------------------------------------------------------


def _container_for(args, split: str) -> D.DatasetContainer:
    if args.container:
        if not Path(args.container).is_file():
            raise UsageError(f"no such file: {args.container}")
        name = args.dataset or Path(args.container).stem
        return D.load_container(args.container, name=name, split=split)
    if not (args.manifest and args.dataset):
        raise UsageError("pass --container, or --manifest with --dataset")
    try:
        return D.load_from_manifest(args.manifest, args.dataset, split)
    except KeyError as err:
        raise UsageError(str(err)) from err


def _checkpoint(args):
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"no such checkpoint: {args.checkpoint}")
    return load_checkpoint(args.checkpoint)


def cmd_eval(args) -> int:
    state = _checkpoint(args)
    splits = args.split or ["test"]
    containers = [_container_for(args, s) for s in splits]
    reports = [error_rate(state.bundle, c, domain=args.domain) for c in containers]
    out = _out_dir(args, ".")
    emit_report(reports, {}, [], out, figures=False)
    for r in reports:
        (out / f"eval_{r.label}.txt").write_text(
            f"dataset={r.dataset} split={r.split} domain={r.domain} n={r.n_examples} error_rate={r.error_rate!r}\n"
        )
        log.info("%s %s: error %.4f on %d examples", r.dataset, r.split, r.error_rate, r.n_examples)
    return 0


def cmd_diagnose(args) -> int:
    state = _checkpoint(args)
    if state.bundle.mode != "jade":
        raise UsageError(f"diagnose needs a jade checkpoint, got {state.bundle.mode}")
    container = _container_for(args, args.split)
    classes = list(range(10)) if args.all_classes else list(args.fixed_class)
    if not classes and not args.random:
        raise UsageError("choose --fixed-class K, --all-classes or --random")
    seed = args.seed or 0
    try:
        profiles = [latent_variance_profile(state.bundle, container, args.n, seed, fixed_class=k, domain=args.domain)
                    for k in classes]
        if args.random:
            profiles.append(latent_variance_profile(state.bundle, container, args.n, seed, domain=args.domain))
    except ValueError as err:
        raise UsageError(str(err)) from err
    emit_report([], {}, profiles, _out_dir(args, "."))
    return 0


COMMANDS = {
    "import-mnist": cmd_import_mnist,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        parser.exit(2, f"jade {args.command}: error: {err}\n")
    except NonFiniteLossError as err:
        log.error("training aborted: %s", err)
        return 3
    except (D.ContainerError, D.IdxError, ValueError, OSError) as err:
        log.error("%s", err)
        return 1


if __name__ == "__main__":
    sys.exit(main())
