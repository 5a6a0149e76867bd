"""Flat key=value experiment configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from jade.training import TrainConfig, format_value, parse_fields, parse_key_values

_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


@dataclass(frozen=True)
class ExperimentConfig:
    """Training settings plus dataset selection and the multi-run protocol.

    ``mode`` may list several modes separated by commas (``single,paired,jade``);
    each gets ``run_count`` runs and one row in the comparison table.
    """

    train: TrainConfig = field(default_factory=TrainConfig)
    modes: tuple[str, ...] = ("jade",)
    manifest: str = ""
    primary: str = "synth-primary"
    auxiliary: str = "synth-auxiliary"
    n_per_class: int = 100
    resample_subset: bool = True
    subset_seed: int = 0
    run_count: int = 3
    evaluate_auxiliary: bool = True
    out_dir: str = "runs"
    parallel_runs: int = 1

    def __post_init__(self):
        if self.run_count < 1:
            raise ValueError("run_count must be >= 1")
        if self.n_per_class < 0:
            raise ValueError("n_per_class must be >= 0 (0 keeps the full training split)")
        if self.parallel_runs < 1:
            raise ValueError("parallel_runs must be >= 1")
        for m in self.modes:
            dataclasses.replace(self.train, mode=m)

    def to_text(self) -> str:
        lines = [f"mode={','.join(self.modes)}\n"]
        lines += [line + "\n" for line in self.train.to_text().splitlines() if not line.startswith("mode=")]
        for f in dataclasses.fields(self):
            if f.name not in ("train", "modes"):
                lines.append(f"{f.name}={format_value(getattr(self, f.name))}\n")
        return "".join(lines)

    def train_config(self, mode: str, run: int) -> TrainConfig:
        """Per-run settings: every seed stream is offset by the run index."""
        return dataclasses.replace(self.train, mode=mode).with_seed_offset(run)

    def subset_seed_for(self, run: int) -> int:
        return self.subset_seed + run if self.resample_subset else self.subset_seed


_OWN_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig) if f.name not in ("train", "modes")}


def experiment_from_values(values: dict[str, str]) -> ExperimentConfig:
    values = dict(values)
    modes = tuple(m.strip() for m in values.pop("mode", "jade").split(",") if m.strip())
    train_vals = {k: v for k, v in values.items() if k in _TRAIN_KEYS}
    own_vals = {k: v for k, v in values.items() if k not in _TRAIN_KEYS}
    unknown = sorted(set(own_vals) - set(_OWN_FIELDS))
    if unknown:
        raise ValueError(f"unknown configuration keys: {', '.join(unknown)}")
    train = TrainConfig(**parse_fields(TrainConfig, {**train_vals, "mode": modes[0] if modes else "jade"}))
    own = parse_fields(ExperimentConfig, own_vals)
    return ExperimentConfig(train=train, modes=modes or ("jade",), **own)


def preset_names() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("jade.presets").iterdir() if p.name.endswith(".txt"))


def preset_text(name: str) -> str:
    if name not in preset_names():
        raise ValueError(f"unknown preset {name!r}; choose from {preset_names()}")
    return resources.files("jade.presets").joinpath(f"{name}.txt").read_text()


def load_experiment(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Read ``path`` (a file, or the name of a bundled preset such as ``synthetic``) and apply overrides."""
    if path and not Path(path).exists() and str(path) in preset_names():
        values = parse_key_values(preset_text(str(path)))
    else:
        values = parse_key_values(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    return experiment_from_values(values)
