"""Diagonal Gaussians, per-domain evidence lower bounds and the joint objective.

All functions operate on batches: the leading axis is the example axis and
per-example quantities come back as 1-d tensors. A single example is just a
batch of one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

LOG_VAR_BOUND = 30.0
BERNOULLI_EPS = 1e-7
LIKELIHOOD_FAMILIES = ("gaussian", "bernoulli")
N_CLASSES = 10

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class DiagGaussian:
    """Gaussian with diagonal covariance, parameterized by mean and log-variance.

    ``log_var`` is clamped to ``[-30, 30]`` on construction.
    """

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ValueError(
                f"mean and log_var shapes differ: {tuple(self.mean.shape)} vs {tuple(self.log_var.shape)}"
            )
        if self.mean.dim() == 0 or self.mean.shape[-1] < 1:
            raise ValueError("DiagGaussian needs at least one dimension")
        object.__setattr__(self, "log_var", self.log_var.clamp(-LOG_VAR_BOUND, LOG_VAR_BOUND))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def var(self) -> Tensor:
        return self.log_var.exp()

    @classmethod
    def standard(cls, shape, dtype=torch.float32) -> "DiagGaussian":
        """N(0, I) with the given batch/event shape."""
        if isinstance(shape, int):
            shape = (shape,)
        return cls(torch.zeros(shape, dtype=dtype), torch.zeros(shape, dtype=dtype))

    def split(self, latent: "LatentSplit") -> tuple["DiagGaussian", "DiagGaussian"]:
        """Return the (style, content) blocks."""
        if self.dim != latent.total:
            raise ValueError(f"posterior has {self.dim} dims, split expects {latent.total}")
        s, c = latent.style, latent.content
        return (
            DiagGaussian(self.mean[..., s.start:s.stop], self.log_var[..., s.start:s.stop]),
            DiagGaussian(self.mean[..., c.start:c.stop], self.log_var[..., c.start:c.stop]),
        )

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.mean).all() and torch.isfinite(self.log_var).all())


@dataclass(frozen=True)
class LatentSplit:
    """Partition of one latent vector into a style block and a content block."""

    total: int = 20
    content_size: int = 10
    content_last: bool = True

    def __post_init__(self):
        if self.total < 1 or not 0 < self.content_size <= self.total:
            raise ValueError(f"invalid latent split: total={self.total}, content={self.content_size}")

    @property
    def style(self) -> range:
        n_style = self.total - self.content_size
        return range(0, n_style) if self.content_last else range(self.content_size, self.total)

    @property
    def content(self) -> range:
        n_style = self.total - self.content_size
        return range(n_style, self.total) if self.content_last else range(0, self.content_size)


@dataclass(frozen=True)
class ObjectiveWeights:
    w_recon: float = 1.0
    w_class: float = 1.0
    w_prior_kl: float = 1.0
    w_match: float = 1.0

    def __post_init__(self):
        for name in ("w_recon", "w_class", "w_prior_kl", "w_match"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be a finite non-negative number, got {value}")


@dataclass(frozen=True)
class ElboTerms:
    """Decomposed lower bound; each field is a per-example tensor or a scalar."""

    recon_loglik: Tensor
    class_loglik: Tensor
    kl_style: Tensor
    kl_content: Tensor

    @property
    def elbo(self) -> Tensor:
        return self.recon_loglik + self.class_loglik - self.kl_style - self.kl_content

    def weighted(self, weights: ObjectiveWeights) -> Tensor:
        return (
            weights.w_recon * self.recon_loglik
            + weights.w_class * self.class_loglik
            - weights.w_prior_kl * self.kl_style
            - weights.w_prior_kl * self.kl_content
        )

    def mean(self) -> "ElboTerms":
        return ElboTerms(
            self.recon_loglik.mean(), self.class_loglik.mean(), self.kl_style.mean(), self.kl_content.mean()
        )

    def as_dict(self) -> dict[str, float]:
        return {
            "recon_loglik": float(self.recon_loglik.detach().mean()),
            "class_loglik": float(self.class_loglik.detach().mean()),
            "kl_style": float(self.kl_style.detach().mean()),
            "kl_content": float(self.kl_content.detach().mean()),
        }


@dataclass(frozen=True)
class JadeLoss:
    elbo_primary: ElboTerms
    elbo_auxiliary: ElboTerms
    match_kl: Tensor
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)

    @property
    def total(self) -> Tensor:
        """Objective to maximize; equals L(x) + L(y) - KL(match) under unit weights."""
        return (
            self.elbo_primary.weighted(self.weights)
            + self.elbo_auxiliary.weighted(self.weights)
            - self.weights.w_match * self.match_kl
        )

    def mean(self) -> "JadeLoss":
        return JadeLoss(self.elbo_primary.mean(), self.elbo_auxiliary.mean(), self.match_kl.mean(), self.weights)

    def as_dict(self) -> dict[str, float]:
        out = {"total": float(self.total.detach().mean()), "match_kl": float(self.match_kl.detach().mean())}
        for prefix, terms in (("primary", self.elbo_primary), ("auxiliary", self.elbo_auxiliary)):
            for key, value in terms.as_dict().items():
                out[f"{prefix}_{key}"] = value
        return out


def _check_finite(q: DiagGaussian, name: str) -> None:
    if not q.is_finite():
        raise ValueError(f"{name} has non-finite parameters")


def kl_between(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) in closed form, summed over the last axis."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")
    _check_finite(q, "q")
    _check_finite(p, "p")
    diff = q.log_var - p.log_var
    # kept in this term order so that p = N(0, I) reproduces kl_to_standard_normal bit for bit
    per_dim = (q.mean - p.mean).pow(2) * torch.exp(-p.log_var) + torch.exp(diff) - 1.0 - diff
    return 0.5 * per_dim.sum(-1)


def kl_to_standard_normal(q: DiagGaussian) -> Tensor:
    _check_finite(q, "q")
    per_dim = q.mean.pow(2) + torch.exp(q.log_var) - 1.0 - q.log_var
    return 0.5 * per_dim.sum(-1)


def reparameterize(q: DiagGaussian, noise: Tensor) -> Tensor:
    """Differentiable sample ``mean + exp(log_var / 2) * noise``."""
    if noise.shape != q.mean.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} does not match posterior {tuple(q.mean.shape)}")
    return q.mean + torch.exp(0.5 * q.log_var) * noise


def _flat(t: Tensor) -> Tensor:
    return t.reshape(t.shape[0], -1) if t.dim() > 1 else t.reshape(-1, 1)


def recon_loglik(x: Tensor, x_hat: Tensor, family: str = "gaussian") -> Tensor:
    """Per-example log p(x | z), summed over all non-batch axes.

    Parameters
    ----------
    x, x_hat : Tensor
        Targets and reconstructions with identical shape, values in [0, 1].
    family : {"gaussian", "bernoulli"}
        Gaussian uses a fixed unit variance. Bernoulli clamps ``x_hat`` to
        ``[1e-7, 1 - 1e-7]`` before taking logs.
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if family not in LIKELIHOOD_FAMILIES:
        raise ValueError(f"unknown likelihood family {family!r}")
    for name, t in (("x", x), ("x_hat", x_hat)):
        if t.numel() and (t.min() < 0 or t.max() > 1):
            raise ValueError(f"{name} has values outside [0, 1]")
    x, x_hat = _flat(x), _flat(x_hat)
    if family == "gaussian":
        n_pixels = x.shape[1]
        return -0.5 * (x - x_hat).pow(2).sum(1) - 0.5 * n_pixels * _LOG_2PI
    x_hat = x_hat.clamp(BERNOULLI_EPS, 1.0 - BERNOULLI_EPS)
    return (x * torch.log(x_hat) + (1.0 - x) * torch.log1p(-x_hat)).sum(1)


def class_loglik(logits: Tensor, labels: Tensor) -> Tensor:
    """log softmax(logits)[label] for each row."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise ValueError("one label per row of logits is required")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    return torch.log_softmax(logits, dim=1).gather(1, labels[:, None]).squeeze(1)


def elbo_domain(
    x: Tensor,
    labels: Tensor,
    q_style: DiagGaussian,
    q_content: DiagGaussian,
    x_hat: Tensor,
    logits: Tensor,
    family: str = "gaussian",
) -> ElboTerms:
    """Single-sample lower bound on log p(x, label) for one domain.

    ``x_hat`` and ``logits`` must already come from one reparameterized draw.
    """
    return ElboTerms(
        recon_loglik=recon_loglik(x, x_hat, family),
        class_loglik=class_loglik(logits, labels),
        kl_style=kl_to_standard_normal(q_style),
        kl_content=kl_to_standard_normal(q_content),
    )


def jade_objective(
    terms_x: ElboTerms,
    terms_y: ElboTerms,
    q_content_x: DiagGaussian,
    q_content_y: DiagGaussian,
    weights: ObjectiveWeights | None = None,
) -> JadeLoss:
    """Combine both domain bounds with the content-matching KL(q_x || q_y)."""
    if q_content_x.dim != q_content_y.dim:
        raise ValueError(f"content dimension mismatch: {q_content_x.dim} vs {q_content_y.dim}")
    return JadeLoss(terms_x, terms_y, kl_between(q_content_x, q_content_y), weights or ObjectiveWeights())
