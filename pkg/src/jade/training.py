"""Training loops for the single, paired and jade modes, gradient checks and checkpoints."""

from __future__ import annotations

import copy
import dataclasses
import io
import itertools
import json
import logging
import math
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
from torch import Tensor

from jade.architectures import MODES, ModelBundle, build_model, preset, tiny_spec, to_tensor
from jade.data import (
    DatasetContainer,
    PairedBatch,
    batch_iterator,
    n_batches,
    paired_class_matched_iterator,
)
from jade.latent import (
    LIKELIHOOD_FAMILIES,
    DiagGaussian,
    JadeLoss,
    ObjectiveWeights,
    class_loglik,
    elbo_domain,
    jade_objective,
    reparameterize,
)

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "momentum", "adam")


class NonFiniteLossError(RuntimeError):
    def __init__(self, term: str, step: int, value: float):
        super().__init__(f"non-finite value {value} in {term} at step {step}")
        self.term = term
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "jade"
    epochs: int = 125
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    w_recon: float = 1.0
    w_class: float = 1.0
    w_prior_kl: float = 1.0
    w_match: float = 1.0
    aux_weight: float = 1.0
    likelihood_primary: str = "gaussian"
    likelihood_auxiliary: str = "gaussian"
    arch_primary: str = "synth-primary"
    arch_auxiliary: str = "synth-auxiliary"
    seed_params: int = 0
    seed_data: int = 0
    seed_noise: int = 0
    eval_every: int = 500
    deterministic: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs must be >= 0, batch_size and eval_every >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be non-negative")
        for fam in (self.likelihood_primary, self.likelihood_auxiliary):
            if fam not in LIKELIHOOD_FAMILIES:
                raise ValueError(f"likelihood must be one of {LIKELIHOOD_FAMILIES}, got {fam!r}")
        self.weights  # validates the weights

    @property
    def weights(self) -> ObjectiveWeights:
        return ObjectiveWeights(self.w_recon, self.w_class, self.w_prior_kl, self.w_match)

    def with_seed_offset(self, offset: int) -> "TrainConfig":
        return dataclasses.replace(
            self,
            seed_params=self.seed_params + offset,
            seed_data=self.seed_data + offset,
            seed_noise=self.seed_noise + offset,
        )

    def to_text(self) -> str:
        return "".join(f"{f.name}={format_value(getattr(self, f.name))}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls(**parse_fields(cls, parse_key_values(text)))


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(kind, raw: str):
    if kind in (bool, "bool"):
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


def parse_fields(cls, values: dict[str, str]) -> dict:
    """Coerce string values to ``cls``'s field types; unknown keys are an error."""
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(types))
    if unknown:
        raise ValueError(f"unknown configuration keys: {', '.join(unknown)}")
    return {key: _coerce(types[key], raw) for key, raw in values.items()}


@dataclass
class TrainState:
    config: TrainConfig
    bundle: ModelBundle
    optimizer: torch.optim.Optimizer
    step: int = 0
    history: list[dict] = field(default_factory=list)


def make_optimizer(config: TrainConfig, params: Iterable[Tensor]) -> torch.optim.Optimizer:
    params = list(params)
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.learning_rate)
    if config.optimizer == "momentum":
        return torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
    return torch.optim.Adam(
        params, lr=config.learning_rate, betas=(config.beta1, config.beta2), eps=config.eps, foreach=False
    )


def build_bundle(config: TrainConfig) -> ModelBundle:
    aux = preset(config.arch_auxiliary) if config.mode != "single" else None
    return build_model(config.mode, preset(config.arch_primary), aux, config.seed_params)


def init_state(config: TrainConfig, bundle: ModelBundle | None = None) -> TrainState:
    bundle = bundle if bundle is not None else build_bundle(config)
    if bundle.mode != config.mode:
        raise ValueError(f"bundle mode {bundle.mode} does not match config mode {config.mode}")
    return TrainState(config, bundle, make_optimizer(config, bundle.parameters()))


def configure_determinism(deterministic: bool) -> None:
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def step_generator(seed: int, step: int, stream: int) -> torch.Generator:
    """Noise source for one (step, stream); resuming at any step reproduces the draws."""
    state = np.random.SeedSequence([seed, step, stream]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


STREAM_REPARAM, STREAM_DROPOUT_PRIMARY, STREAM_DROPOUT_AUXILIARY = 0, 1, 2


def _check_finite(values: dict[str, float], step: int) -> None:
    # aggregates last, so the error names the term that went bad first
    for term, value in sorted(values.items(), key=lambda kv: kv[0] == "total"):
        if not math.isfinite(value):
            raise NonFiniteLossError(term, step, value)


def _dtype(bundle: ModelBundle) -> torch.dtype:
    return next(bundle.parameters()).dtype


def _labels(labels: np.ndarray) -> Tensor:
    return torch.as_tensor(labels.astype(np.int64))


def classification_loss(
    bundle: ModelBundle, codes: Tensor, labels: Tensor, generator: torch.Generator | None
) -> Tensor:
    """Mean categorical cross-entropy of the shared classifier on given codes (dropout on)."""
    logits = bundle.classify_logits(codes, train_mode=True, generator=generator)
    return -class_loglik(logits, labels).mean()


def _apply(optimizer: torch.optim.Optimizer, loss: Tensor) -> None:
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()


def train_step_single(state: TrainState, images: np.ndarray, labels: np.ndarray) -> float:
    """One cross-entropy step on a primary batch; returns the pre-step loss."""
    bundle = state.bundle
    bundle.train()
    x = to_tensor(images, _dtype(bundle))
    gen = step_generator(state.config.seed_noise, state.step, STREAM_DROPOUT_PRIMARY)
    codes = bundle.encode("primary", x).q_full.mean
    loss = classification_loss(bundle, codes, _labels(labels), gen)
    _check_finite({"primary_cross_entropy": float(loss.detach())}, state.step)
    _apply(state.optimizer, loss)
    state.step += 1
    return float(loss.detach())


def train_step_paired(state: TrainState, batch: PairedBatch) -> tuple[float, float]:
    """Primary-batch step, then auxiliary-batch step, both through the shared classifier.

    With ``aux_weight == 0`` the auxiliary step is skipped entirely so the
    primary trajectory matches single mode exactly.
    """
    bundle, cfg = state.bundle, state.config
    bundle.train()
    dtype = _dtype(bundle)
    gen_x = step_generator(cfg.seed_noise, state.step, STREAM_DROPOUT_PRIMARY)
    codes_x = bundle.encode("primary", to_tensor(batch.x_images, dtype)).q_full.mean
    loss_x = classification_loss(bundle, codes_x, _labels(batch.x_labels), gen_x)
    _check_finite({"primary_cross_entropy": float(loss_x.detach())}, state.step)
    _apply(state.optimizer, loss_x)

    loss_y = 0.0
    if cfg.aux_weight > 0:
        gen_y = step_generator(cfg.seed_noise, state.step, STREAM_DROPOUT_AUXILIARY)
        codes_y = bundle.encode("auxiliary", to_tensor(batch.y_images, dtype)).q_full.mean
        ce_y = classification_loss(bundle, codes_y, _labels(batch.y_labels), gen_y)
        _check_finite({"auxiliary_cross_entropy": float(ce_y.detach())}, state.step)
        _apply(state.optimizer, cfg.aux_weight * ce_y)
        loss_y = float(ce_y.detach())
    state.step += 1
    return float(loss_x.detach()), loss_y


@dataclass
class JadeForward:
    loss: JadeLoss  # per-example terms
    content_x: Tensor  # sampled content codes fed to the classifier
    content_y: Tensor
    recon_x: Tensor
    recon_y: Tensor


def jade_forward(
    bundle: ModelBundle,
    x: Tensor,
    labels_x: Tensor,
    y: Tensor,
    labels_y: Tensor,
    weights: ObjectiveWeights,
    families: tuple[str, str] = ("gaussian", "gaussian"),
    noise: tuple[Tensor, Tensor] | None = None,
    noise_generator: torch.Generator | None = None,
    dropout_generator: torch.Generator | None = None,
    train_mode: bool = True,
) -> JadeForward:
    """Encode both domains, draw one reparameterized sample each, decode and classify."""
    out_x, out_y = bundle.encode("primary", x), bundle.encode("auxiliary", y)
    for name, out in (("primary posterior", out_x), ("auxiliary posterior", out_y)):
        if not out.q_full.is_finite():
            raise NonFiniteLossError(name, -1, float("nan"))
    if noise is None:
        shape = out_x.q_full.mean.shape
        eps_x = torch.randn(shape, generator=noise_generator, dtype=x.dtype)
        eps_y = torch.randn(out_y.q_full.mean.shape, generator=noise_generator, dtype=x.dtype)
    else:
        eps_x, eps_y = noise
    z_x, z_y = reparameterize(out_x.q_full, eps_x), reparameterize(out_y.q_full, eps_y)
    content = bundle.latent.content
    c_x, c_y = z_x[:, content.start:content.stop], z_y[:, content.start:content.stop]
    logits_x = bundle.classify_logits(c_x, train_mode, dropout_generator)
    logits_y = bundle.classify_logits(c_y, train_mode, dropout_generator)
    x_hat, y_hat = bundle.decode("primary", z_x), bundle.decode("auxiliary", z_y)
    style_x, content_qx = out_x.q_full.split(bundle.latent)
    style_y, content_qy = out_y.q_full.split(bundle.latent)
    terms_x = elbo_domain(x, labels_x, style_x, content_qx, x_hat, logits_x, families[0])
    terms_y = elbo_domain(y, labels_y, style_y, content_qy, y_hat, logits_y, families[1])
    return JadeForward(jade_objective(terms_x, terms_y, content_qx, content_qy, weights), c_x, c_y, x_hat, y_hat)


def train_step_jade(state: TrainState, batch: PairedBatch) -> JadeLoss:
    """One ascent step on the joint objective (descent on its negation); returns batch means."""
    bundle, cfg = state.bundle, state.config
    bundle.train()
    dtype = _dtype(bundle)
    fwd = jade_forward(
        bundle,
        to_tensor(batch.x_images, dtype),
        _labels(batch.x_labels),
        to_tensor(batch.y_images, dtype),
        _labels(batch.y_labels),
        cfg.weights,
        (cfg.likelihood_primary, cfg.likelihood_auxiliary),
        noise_generator=step_generator(cfg.seed_noise, state.step, STREAM_REPARAM),
        dropout_generator=step_generator(cfg.seed_noise, state.step, STREAM_DROPOUT_PRIMARY),
    )
    loss = fwd.loss
    summary = loss.as_dict()
    _check_finite(summary, state.step)
    _apply(state.optimizer, -loss.total.mean())
    state.step += 1
    return loss.mean()


# --- full runs ---------------------------------------------------------------


def _evaluate_into_history(state: TrainState, eval_sets, on_record) -> None:
    from jade.evaluation import error_rate

    for domain, container in eval_sets:
        report = error_rate(state.bundle, container, domain=domain)
        record = {
            "kind": "eval",
            "step": state.step,
            "domain": domain,
            "dataset": container.name,
            "split": container.split,
            "error": report.error_rate,
        }
        state.history.append(record)
        if on_record is not None:
            on_record(record)


def run_training(
    config: TrainConfig,
    primary: DatasetContainer,
    auxiliary: DatasetContainer | None = None,
    eval_sets: Iterable[tuple[str, DatasetContainer]] = (),
    state: TrainState | None = None,
    max_steps: int | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> TrainState:
    """Train for ``config.epochs`` epochs over the primary set, resuming from ``state`` if given.

    ``max_steps`` stops early (used to cut checkpoints mid-run). Evaluations
    on ``eval_sets`` (pairs of domain name and container) land in the history
    every ``eval_every`` steps and after the final epoch, never at an early
    cut, so a resumed run logs exactly what an uninterrupted one does.
    """
    configure_determinism(config.deterministic)
    if config.mode != "single" and auxiliary is None:
        raise ValueError(f"{config.mode} mode needs an auxiliary dataset")
    eval_sets = list(eval_sets)
    state = state if state is not None else init_state(config)
    per_epoch = n_batches(len(primary), config.batch_size)
    stop = end = config.epochs * per_epoch
    if max_steps is not None:
        stop = min(stop, max_steps)
    if state.step == 0 and not state.history and eval_sets:
        _evaluate_into_history(state, eval_sets, on_record)

    started = time.perf_counter()
    start_step = state.step
    batches = None
    while state.step < stop:
        epoch, offset = divmod(state.step, per_epoch)
        if batches is None or offset == 0:
            if config.mode == "single":
                it = batch_iterator(primary, config.batch_size, config.seed_data, epoch)
            else:
                it = paired_class_matched_iterator(primary, auxiliary, config.batch_size, config.seed_data, epoch)
            batches = itertools.islice(it, offset, None)
        batch = next(batches)
        step = state.step
        if config.mode == "single":
            record = {"primary_cross_entropy": train_step_single(state, batch.images, batch.labels)}
        elif config.mode == "paired":
            loss_x, loss_y = train_step_paired(state, batch)
            record = {"primary_cross_entropy": loss_x, "auxiliary_cross_entropy": loss_y}
        else:
            record = train_step_jade(state, batch).as_dict()
        state.history.append({"kind": "train", "step": step, "epoch": epoch, **record})
        if eval_sets and (state.step % config.eval_every == 0 or state.step == end):
            _evaluate_into_history(state, eval_sets, on_record)
    elapsed = time.perf_counter() - started
    log.info("%s: %d steps in %.1fs (step %d)", config.mode, state.step - start_step, elapsed, state.step)
    return state


def train_records(history: list[dict]) -> list[dict]:
    return [r for r in history if r["kind"] == "train"]


def objective_trace(history: list[dict]) -> np.ndarray:
    """Per-step objective to maximize (negated cross-entropy outside jade mode)."""
    out = []
    for r in train_records(history):
        if "total" in r:
            out.append(r["total"])
        else:
            out.append(-(r["primary_cross_entropy"] + r.get("auxiliary_cross_entropy", 0.0)))
    return np.asarray(out)


def unweighted_objective_trace(history: list[dict]) -> np.ndarray:
    """Per-step jade objective with every weight set to 1, rebuilt from the logged batch means."""
    out = []
    for r in train_records(history):
        elbos = [
            r[f"{d}_recon_loglik"] + r[f"{d}_class_loglik"] - r[f"{d}_kl_style"] - r[f"{d}_kl_content"]
            for d in ("primary", "auxiliary")
        ]
        out.append(elbos[0] + elbos[1] - r["match_kl"])
    return np.asarray(out)


# --- finite-difference gradient check ----------------------------------------


@dataclass
class GradcheckReport:
    max_relative_error: float
    coordinates_checked: int
    per_module: dict[str, int]
    failures: list[dict]
    tolerance: float
    skipped_kinks: int = 0

    @property
    def passed(self) -> bool:
        return not self.failures


@dataclass(frozen=True)
class GradcheckConfig:
    weights: ObjectiveWeights = ObjectiveWeights()
    families: tuple[str, str] = ("gaussian", "gaussian")
    n_coords: int = 60
    batch_size: int = 4
    fd_step: float = 1e-5
    tolerance: float = 1e-4
    # relative error uses max(|analytic|, |numeric|, floor) as its denominator
    denominator_floor: float = 1e-6
    # one-sided differences disagreeing by more than this (relative) mark a kink
    kink_ratio: float = 1e-2
    seed: int = 0


def _relative_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradcheck_problem(cfg: GradcheckConfig):
    """Reduced double-precision jade model, data and a closure for the negated objective."""
    spec = tiny_spec()
    bundle = build_model("jade", spec, spec, cfg.seed).double()
    rng = np.random.default_rng(cfg.seed)
    b = cfg.batch_size
    x = torch.as_tensor(rng.uniform(0.0, 1.0, (b, 1, 8, 8)))
    y = torch.as_tensor(rng.uniform(0.0, 1.0, (b, 1, 8, 8)))
    labels = torch.as_tensor(rng.integers(0, 10, b))
    total = bundle.latent.total
    noise = (torch.as_tensor(rng.standard_normal((b, total))), torch.as_tensor(rng.standard_normal((b, total))))
    dropout_seed = int(rng.integers(2**31))

    def objective() -> Tensor:
        fwd = jade_forward(
            bundle, x, labels, y, labels, cfg.weights, cfg.families, noise=noise,
            dropout_generator=torch.Generator().manual_seed(dropout_seed),
        )
        return -fwd.loss.total.mean()

    return bundle, objective


def _central_difference(objective, flat: Tensor, index: int, step: float) -> tuple[float, float]:
    """Central difference plus the gap between the two one-sided differences."""
    original = float(flat[index])
    f0 = float(objective())
    flat[index] = original + step
    f_plus = float(objective())
    flat[index] = original - step
    f_minus = float(objective())
    flat[index] = original
    return (f_plus - f_minus) / (2 * step), abs((f_plus - f0) - (f0 - f_minus)) / step


def finite_difference_gradcheck(cfg: GradcheckConfig = GradcheckConfig()) -> GradcheckReport:
    """Compare autograd gradients of the negated joint objective with central differences.

    Coordinates are spread evenly over encoders, decoders and the classifier.
    A coordinate whose +/- perturbation straddles a ReLU or max-pool switch has
    one-sided differences that disagree by far more than curvature allows;
    such coordinates are replaced by a fresh draw from the same module.
    """
    bundle, objective = gradcheck_problem(cfg)
    bundle.zero_grad(set_to_none=True)
    objective().backward()
    groups: dict[str, list[tuple[str, torch.nn.Parameter]]] = {}
    for name, param in bundle.named_parameters():
        groups.setdefault(name.split(".")[0], []).append((name, param))
    rng = np.random.default_rng(cfg.seed + 1)
    per_group = -(-cfg.n_coords // len(groups))

    failures, worst, counts, skipped = [], 0.0, {}, 0
    with torch.no_grad():
        for module, params in groups.items():
            sizes = np.array([p.numel() for _, p in params], dtype=np.float64)
            done = 0
            while done < per_group:
                j = rng.choice(len(params), p=sizes / sizes.sum())
                name, param = params[j]
                flat_index = int(rng.integers(param.numel()))
                analytic = float(param.grad.view(-1)[flat_index]) if param.grad is not None else 0.0
                numeric, kink = _central_difference(objective, param.view(-1), flat_index, cfg.fd_step)
                scale = max(abs(analytic), abs(numeric), cfg.denominator_floor)
                if kink > cfg.kink_ratio * scale:
                    skipped += 1
                    if skipped > 10 * cfg.n_coords:
                        raise RuntimeError("too many coordinates sit on non-differentiable points")
                    continue
                done += 1
                rel = _relative_error(analytic, numeric, cfg.denominator_floor)
                worst = max(worst, rel)
                counts[module] = counts.get(module, 0) + 1
                if rel >= cfg.tolerance:
                    failures.append(
                        {"module": module, "parameter": name, "index": flat_index,
                         "analytic": analytic, "numeric": numeric, "relative_error": rel}
                    )
    return GradcheckReport(worst, sum(counts.values()), counts, failures, cfg.tolerance, skipped)


def analytic_gradients(cfg: GradcheckConfig) -> dict[str, Tensor]:
    bundle, objective = gradcheck_problem(cfg)
    bundle.zero_grad(set_to_none=True)
    objective().backward()
    return {
        name: (p.grad.clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in bundle.named_parameters()
    }


# --- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"JADK"
CHECKPOINT_VERSION = 1
_MODE_CODES = {m: i for i, m in enumerate(MODES)}
_STATE_KEYS = ("exp_avg", "exp_avg_sq", "step", "momentum_buffer", "max_exp_avg_sq")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointModeError(CheckpointError):
    pass


def _f32(t: Tensor) -> bytes:
    return t.detach().to(torch.float32).contiguous().numpy().astype("<f4", copy=False).tobytes()


def checkpoint_bytes(state: TrainState) -> bytes:
    """Serialize config, parameters, optimizer accumulators, step and history.

    Layout (little-endian): magic, u16 version, u8 mode, u32-prefixed config
    text, u64 parameter count + f32 parameters, per-parameter optimizer
    entries, u64 step, u64-prefixed JSON-lines history, u32 CRC of all
    preceding bytes.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HB", CHECKPOINT_VERSION, _MODE_CODES[state.config.mode]))
    text = state.config.to_text().encode()
    buf.write(struct.pack("<I", len(text)) + text)
    params = list(state.bundle.parameters())
    buf.write(struct.pack("<Q", sum(p.numel() for p in params)))
    for p in params:
        buf.write(_f32(p))
    for p in params:
        entries = [(k, v) for k, v in sorted(state.optimizer.state.get(p, {}).items(), key=lambda kv: kv[0])
                   if k in _STATE_KEYS and v is not None]
        buf.write(struct.pack("<B", len(entries)))
        for key, value in entries:
            value = torch.as_tensor(value)
            buf.write(struct.pack("<BQ", _STATE_KEYS.index(key), value.numel()))
            buf.write(_f32(value))
    buf.write(struct.pack("<Q", state.step))
    history = "".join(json.dumps(r, sort_keys=True) + "\n" for r in state.history).encode()
    buf.write(struct.pack("<Q", len(history)) + history)
    payload = buf.getvalue()
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointCorruptError("checkpoint truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").copy()


def load_checkpoint(path, config: TrainConfig | None = None) -> TrainState:
    """Rebuild a TrainState. If ``config`` is given its mode must match the file."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError(f"{path}: not a JADK checkpoint")
    if len(raw) < 11:
        raise CheckpointCorruptError(f"{path}: checkpoint truncated")
    version, mode_code = struct.unpack_from("<HB", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise CheckpointCorruptError(f"{path}: checksum mismatch")
    if mode_code >= len(MODES):
        raise CheckpointCorruptError(f"{path}: unknown mode code {mode_code}")
    mode = MODES[mode_code]
    if config is not None and config.mode != mode:
        raise CheckpointModeError(f"{path}: checkpoint holds a {mode} model, config expects {config.mode}")

    r = _Reader(raw[:-4])
    r.take(7)
    (text_len,) = r.unpack("<I")
    stored = TrainConfig.from_text(r.take(text_len).decode())
    state = init_state(stored)
    params = list(state.bundle.parameters())
    (count,) = r.unpack("<Q")
    if count != sum(p.numel() for p in params):
        raise CheckpointCorruptError(f"{path}: parameter count {count} does not match the architecture")
    with torch.no_grad():
        for p in params:
            p.copy_(torch.from_numpy(r.floats(p.numel())).reshape(p.shape))
    opt_state = {}
    for i, p in enumerate(params):
        (n_entries,) = r.unpack("<B")
        entry = {}
        for _ in range(n_entries):
            key_code, numel = r.unpack("<BQ")
            values = torch.from_numpy(r.floats(numel))
            key = _STATE_KEYS[key_code]
            entry[key] = values.reshape(()) if key == "step" else values.reshape(p.shape)
        if entry:
            opt_state[i] = entry
    sd = state.optimizer.state_dict()
    sd["state"] = opt_state
    state.optimizer.load_state_dict(sd)
    (state.step,) = r.unpack("<Q")
    (hist_len,) = r.unpack("<Q")
    state.history = [json.loads(line) for line in r.take(hist_len).decode().splitlines() if line]
    if r.pos != len(r.raw):
        raise CheckpointCorruptError(f"{path}: trailing bytes")
    return state


def snapshot(bundle: ModelBundle) -> ModelBundle:
    """Frozen copy for concurrent evaluation."""
    copy_ = copy.deepcopy(bundle)
    copy_.eval()
    for p in copy_.parameters():
        p.requires_grad_(False)
    return copy_
