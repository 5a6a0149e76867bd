"""Error rates, multi-run aggregation and latent variance profiles."""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from jade.architectures import MODES, ModelBundle, to_tensor
from jade.data import DatasetContainer
from jade.latent import N_CLASSES


@dataclass(frozen=True)
class EvalReport:
    dataset: str
    split: str
    n_examples: int
    error_rate: float
    per_class_errors: tuple[float, ...]
    confusion: np.ndarray  # rows: true class, columns: predicted class
    domain: str = "primary"

    @property
    def label(self) -> str:
        return f"{self.dataset}_{self.split}"


@dataclass(frozen=True)
class RunAggregate:
    per_run_errors: tuple[float, ...]
    mean: float
    sample_std: float

    def format(self) -> str:
        """mean±std in percent with two decimals."""
        return f"{100 * self.mean:.2f}±{100 * self.sample_std:.2f}"


@dataclass(frozen=True)
class VarianceProfile:
    per_dim_variance: np.ndarray
    normalized: np.ndarray
    condition: str  # "class<k>" or "random"
    n_samples: int


def _batched_codes(bundle: ModelBundle, container: DatasetContainer, domain: str, batch_size: int, full: bool):
    dtype = next(bundle.parameters()).dtype
    chunks = []
    with torch.no_grad():
        for start in range(0, len(container), batch_size):
            x = to_tensor(container.images[start:start + batch_size], dtype)
            out = bundle.encode(domain, x)
            chunks.append(out.q_full.mean if full else out.split(bundle.latent)[1].mean)
    return torch.cat(chunks) if chunks else torch.zeros((0, bundle.classifier_shared.in_dim), dtype=dtype)


def predict(bundle: ModelBundle, container: DatasetContainer, domain: str = "primary",
            batch_size: int = 1000) -> np.ndarray:
    """Argmax class on posterior means / bottleneck codes with dropout off; ties go to the lowest index."""
    was_training = bundle.training
    bundle.eval()
    try:
        codes = _batched_codes(bundle, container, domain, batch_size, full=False)
        with torch.no_grad():
            logits = bundle.classify_logits(codes, train_mode=False).double().numpy()
    finally:
        bundle.train(was_training)
    return np.argmax(logits, axis=1) if len(logits) else np.zeros(0, dtype=np.int64)


def report_from_predictions(labels: np.ndarray, predictions: np.ndarray, dataset: str, split: str,
                            domain: str = "primary") -> EvalReport:
    labels = np.asarray(labels, dtype=np.int64)
    confusion = np.bincount(labels * N_CLASSES + predictions, minlength=N_CLASSES**2).reshape(N_CLASSES, N_CLASSES)
    n = int(labels.size)
    correct = int(np.trace(confusion))
    per_class_total = confusion.sum(axis=1)
    per_class = tuple(
        float(1.0 - confusion[k, k] / per_class_total[k]) if per_class_total[k] else float("nan")
        for k in range(N_CLASSES)
    )
    error = 1.0 - correct / n if n else float("nan")
    return EvalReport(dataset, split, n, error, per_class, confusion, domain)


def error_rate(bundle: ModelBundle, container: DatasetContainer, domain: str = "primary") -> EvalReport:
    predictions = predict(bundle, container, domain)
    return report_from_predictions(container.labels, predictions, container.name, container.split, domain)


def aggregate_runs(errors) -> RunAggregate:
    errors = tuple(float(e) for e in errors)
    if len(errors) < 2:
        raise ValueError("aggregation needs at least two runs")
    # statistics works in exact rationals, so identical runs give a std of exactly 0
    return RunAggregate(errors, statistics.mean(errors), statistics.stdev(errors))


def latent_variance_profile(
    bundle: ModelBundle,
    container: DatasetContainer,
    n_samples: int,
    seed: int,
    fixed_class: int | None = None,
    domain: str = "primary",
) -> VarianceProfile:
    """Per-dimension variance of posterior means over a sample, scaled by the largest dimension.

    ``fixed_class=k`` samples only class ``k`` (content fixed, style varying);
    ``None`` samples across all classes.
    """
    if bundle.mode != "jade":
        raise ValueError("variance profiles need a jade model")
    rng = np.random.default_rng(seed)
    if fixed_class is None:
        pool, condition = np.arange(len(container)), "random"
    else:
        pool, condition = np.flatnonzero(container.labels == fixed_class), f"class{fixed_class}"
    if pool.size < n_samples:
        raise ValueError(f"{condition}: {pool.size} examples available, {n_samples} requested")
    chosen = np.sort(rng.choice(pool, n_samples, replace=False))
    was_training = bundle.training
    bundle.eval()
    try:
        means = _batched_codes(bundle, container.subset(chosen), domain, 1000, full=True).double().numpy()
    finally:
        bundle.train(was_training)
    variance = means.var(axis=0)
    top = variance.max()
    normalized = variance / top if top > 0 else np.zeros_like(variance)
    return VarianceProfile(variance, normalized, condition, n_samples)


def content_style_medians(profile: VarianceProfile, bundle: ModelBundle) -> tuple[float, float]:
    c, s = bundle.latent.content, bundle.latent.style
    return (float(np.median(profile.normalized[c.start:c.stop])),
            float(np.median(profile.normalized[s.start:s.stop])))


# --- report files ------------------------------------------------------------

TABLE_TITLES = {"single": "Single Classifier", "paired": "Paired Classifier", "jade": "JADE"}


def _csv_text(header, rows) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return out.getvalue()


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def results_table(aggregates: dict[str, dict[str, RunAggregate]], columns: list[str]) -> str:
    """Text table with one row per mode in single, paired, jade order."""
    rows = [["Method"] + columns]
    for mode in MODES:
        if mode not in aggregates:
            continue
        rows.append([TABLE_TITLES[mode]] + [aggregates[mode][c].format() if c in aggregates[mode] else "-"
                                            for c in columns])
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = [" | ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def emit_report(
    reports: list[EvalReport],
    aggregates: dict[str, dict[str, RunAggregate]],
    profiles: list[VarianceProfile],
    out_dir,
    figures: bool = True,
) -> list[Path]:
    """Write the comparison table, eval reports and variance profiles under ``out_dir``.

    ``aggregates`` maps mode -> column label (e.g. ``"synth-primary (1000 samples)"``) -> runs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    columns = []
    for mode in MODES:
        for col in aggregates.get(mode, {}):
            if col not in columns:
                columns.append(col)
    if aggregates:
        written.append(_write(out / "results.txt", results_table(aggregates, columns)))
        rows = []
        for mode in MODES:
            for col, agg in aggregates.get(mode, {}).items():
                runs = ";".join(repr(e) for e in agg.per_run_errors)
                rows.append([mode, col, len(agg.per_run_errors), repr(agg.mean), repr(agg.sample_std), runs])
        written.append(_write(out / "results.csv", _csv_text(
            ["method", "dataset", "runs", "mean_error", "std_error", "per_run_errors"], rows)))
    if reports:
        rows = [[r.dataset, r.split, r.domain, r.n_examples, repr(r.error_rate)]
                + [repr(e) for e in r.per_class_errors] for r in reports]
        header = ["dataset", "split", "domain", "n_examples", "error_rate"] + [f"error_class{k}" for k in range(10)]
        written.append(_write(out / "eval_reports.csv", _csv_text(header, rows)))
        for r in reports:
            written.append(_write(out / f"confusion_{r.label}.csv", _csv_text(
                ["true"] + [f"pred{k}" for k in range(10)],
                [[k] + [int(v) for v in r.confusion[k]] for k in range(10)])))
    for p in profiles:
        rows = [[d, repr(float(v)), repr(float(nv)), p.condition]
                for d, (v, nv) in enumerate(zip(p.per_dim_variance, p.normalized))]
        written.append(_write(out / f"profile_{p.condition}.csv",
                              _csv_text(["dim", "variance", "normalized", "condition"], rows)))
    if figures:
        from jade import plotting

        if aggregates:
            written.append(plotting.plot_results(aggregates, columns, out / "results.png"))
        if profiles:
            written.append(plotting.plot_profiles(profiles, out / "profiles.png"))
    return written
