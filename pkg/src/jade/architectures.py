"""Encoders, mirrored decoders and the shared classifier for the three model modes.

Images enter the networks as float tensors in NCHW layout with values in
[0, 1]; containers store NHWC bytes and :func:`to_tensor` converts between
the two.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from jade.latent import LOG_VAR_BOUND, N_CLASSES, DiagGaussian, LatentSplit

MODES = ("single", "paired", "jade")
DOMAINS = ("primary", "auxiliary")
BOTTLENECK_DIM = 10


@dataclass(frozen=True)
class ArchSpec:
    """Layer shapes for one domain's encoder (and mirrored decoder) plus the classifier MLP.

    ``pool_after`` holds 0-based indices of the conv layers followed by a 2x max-pool.
    """

    input_shape: tuple[int, int, int]  # (height, width, channels)
    conv_filters: tuple[int, ...]
    pool_after: tuple[int, ...]
    bottleneck_dim: int = BOTTLENECK_DIM
    mlp_blocks: int = 3
    mlp_width: int = 500
    dropout_p: float = 0.5
    latent: LatentSplit | None = field(default_factory=LatentSplit)

    def __post_init__(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (height, width, channels), got {self.input_shape}")
        if not self.conv_filters or min(self.conv_filters) < 1:
            raise ValueError("at least one conv layer with a positive filter count is required")
        if any(i < 0 or i >= len(self.conv_filters) for i in self.pool_after):
            raise ValueError(f"pool index out of range: {self.pool_after}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.mlp_blocks < 1 or self.mlp_width < 1 or self.bottleneck_dim < 1:
            raise ValueError("mlp_blocks, mlp_width and bottleneck_dim must be positive")
        self.spatial_sizes()

    def spatial_sizes(self) -> list[tuple[int, int]]:
        """(height, width) after every conv layer, including its pool if any."""
        h, w, _ = self.input_shape
        sizes = []
        for i in range(len(self.conv_filters)):
            if i in self.pool_after:
                h, w = h // 2, w // 2
                if h == 0 or w == 0:
                    raise ValueError(f"pooling after conv layer {i} reduces the feature map to zero size")
            sizes.append((h, w))
        return sizes

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        """(channels, height, width) of the last conv feature map."""
        h, w = self.spatial_sizes()[-1]
        return (self.conv_filters[-1], h, w)

    @property
    def feature_count(self) -> int:
        return math.prod(self.feature_shape)


def svhn_spec(**overrides) -> ArchSpec:
    return replace(ArchSpec((32, 32, 3), (64, 96, 64, 8), (0, 1, 2)), **overrides)


def mnist_spec(**overrides) -> ArchSpec:
    return replace(ArchSpec((28, 28, 1), (32, 32, 16), (0, 1, 2)), **overrides)


def synth_primary_spec(**overrides) -> ArchSpec:
    """Narrower four-layer stack for the 16x16 colour synthetic domain."""
    return replace(ArchSpec((16, 16, 3), (16, 24, 16, 8), (0, 1, 2)), **overrides)


def synth_auxiliary_spec(**overrides) -> ArchSpec:
    return replace(ArchSpec((16, 16, 1), (8, 8, 8), (0, 1, 2)), **overrides)


def tiny_spec(**overrides) -> ArchSpec:
    """Reduced model used for finite-difference gradient checks."""
    base = ArchSpec(
        (8, 8, 1), (4, 4), (0, 1), bottleneck_dim=2, mlp_width=16, latent=LatentSplit(total=4, content_size=2)
    )
    return replace(base, **overrides)


PRESETS = {
    "svhn": svhn_spec,
    "mnist": mnist_spec,
    "synth-primary": synth_primary_spec,
    "synth-auxiliary": synth_auxiliary_spec,
    "tiny": tiny_spec,
}


def preset(name: str) -> ArchSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown architecture preset {name!r}; choose from {sorted(PRESETS)}") from None


def to_tensor(images: np.ndarray, dtype=torch.float32) -> Tensor:
    """uint8 NHWC -> float NCHW in [0, 1] (exactly v / 255)."""
    arr = torch.from_numpy(np.ascontiguousarray(images))
    return (arr.to(torch.float64) / 255.0).to(dtype).permute(0, 3, 1, 2).contiguous()


def _derived_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def _init_uniform_(module: nn.Module, seed: int) -> None:
    """Fan-in scaled uniform weights (variance 1/fan_in), zero biases."""
    gen = torch.Generator().manual_seed(seed)
    for sub in module.modules():
        if isinstance(sub, (nn.Conv2d, nn.Linear)):
            fan_in = sub.weight[0].numel()
            bound = math.sqrt(3.0 / fan_in)
            with torch.no_grad():
                sub.weight.copy_(torch.rand(sub.weight.shape, generator=gen) * (2 * bound) - bound)
                sub.bias.zero_()


def dropout(x: Tensor, p: float, generator: torch.Generator | None) -> Tensor:
    """Inverted dropout drawing its mask from ``generator``."""
    if p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


class Encoder(nn.Module):
    def __init__(self, spec: ArchSpec, out_dim: int):
        super().__init__()
        self.spec = spec
        channels = (spec.input_shape[2],) + spec.conv_filters
        self.convs = nn.ModuleList(
            nn.Conv2d(channels[i], channels[i + 1], 3, padding=1) for i in range(len(spec.conv_filters))
        )
        self.head = nn.Linear(spec.feature_count, out_dim)

    def features(self, x: Tensor) -> Tensor:
        for i, conv in enumerate(self.convs):
            x = F.relu(conv(x))
            if i in self.spec.pool_after:
                x = F.max_pool2d(x, 2)
        return x

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.features(x).flatten(1))


class Decoder(nn.Module):
    """Mirror of :class:`Encoder`: projection, then reversed convs with nearest up-sampling.

    Each up-sampling restores the exact pre-pool size of the mirrored layer, so
    odd sizes (28 -> 14 -> 7 -> 3) come back as 3 -> 7 -> 14 -> 28.
    """

    def __init__(self, spec: ArchSpec, latent_dim: int):
        super().__init__()
        self.spec = spec
        self.project = nn.Linear(latent_dim, spec.feature_count)
        channels = (spec.input_shape[2],) + spec.conv_filters
        n = len(spec.conv_filters)
        # convs[j] mirrors encoder layer n-1-j, mapping channels[n-j] -> channels[n-1-j]
        self.convs = nn.ModuleList(nn.Conv2d(channels[i + 1], channels[i], 3, padding=1) for i in reversed(range(n)))
        h, w, _ = spec.input_shape
        pre_pool = []
        for i in range(n):
            pre_pool.append((h, w))
            if i in spec.pool_after:
                h, w = h // 2, w // 2
        self._upsample_to = pre_pool

    def forward(self, z: Tensor) -> Tensor:
        x = F.relu(self.project(z)).reshape(z.shape[0], *self.spec.feature_shape)
        n = len(self.convs)
        for j, conv in enumerate(self.convs):
            layer = n - 1 - j
            if layer in self.spec.pool_after:
                x = F.interpolate(x, size=self._upsample_to[layer], mode="nearest")
            x = conv(x)
            x = torch.sigmoid(x) if layer == 0 else F.relu(x)
        return x


class SharedClassifier(nn.Module):
    def __init__(self, in_dim: int, width: int, blocks: int, dropout_p: float):
        super().__init__()
        dims = [in_dim] + [width] * blocks
        self.blocks = nn.ModuleList(nn.Linear(dims[i], dims[i + 1]) for i in range(blocks))
        self.out = nn.Linear(width, N_CLASSES)
        self.in_dim = in_dim
        self.dropout_p = dropout_p

    def forward(self, h: Tensor, train_mode: bool = False, generator: torch.Generator | None = None) -> Tensor:
        if h.shape[-1] != self.in_dim:
            raise ValueError(f"classifier expects {self.in_dim} input dims, got {h.shape[-1]}")
        for layer in self.blocks:
            h = F.relu(layer(h))
            if train_mode:
                h = dropout(h, self.dropout_p, generator)
        return self.out(h)


@dataclass
class EncoderOutput:
    q_full: DiagGaussian
    features_shape: tuple[int, int, int]
    deterministic: bool = False

    def split(self, latent: LatentSplit | None) -> tuple[DiagGaussian | None, DiagGaussian]:
        """(style, content); deterministic bottlenecks have no style block."""
        if self.deterministic or latent is None:
            return None, self.q_full
        return self.q_full.split(latent)


class ModelBundle(nn.Module):
    """Every trainable network of one model plus its mode tag.

    In paired and jade modes both domains call the same ``classifier_shared``
    object, so gradients from either domain land in one parameter set.
    """

    def __init__(self, mode: str, spec_primary: ArchSpec, spec_auxiliary: ArchSpec | None, seed: int = 0):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if mode != "single" and spec_auxiliary is None:
            raise ValueError(f"{mode} mode needs an auxiliary architecture")
        self.mode = mode
        self.spec_primary = spec_primary
        self.spec_auxiliary = spec_auxiliary if mode != "single" else None
        self.seed = seed
        if mode == "jade":
            self.latent = spec_primary.latent or LatentSplit()
            if spec_auxiliary.latent not in (None, self.latent):
                raise ValueError("both domains must share one latent split")
            enc_out, cls_in = 2 * self.latent.total, self.latent.content_size
        else:
            self.latent = None
            enc_out = cls_in = spec_primary.bottleneck_dim
            if mode == "paired" and spec_auxiliary.bottleneck_dim != enc_out:
                raise ValueError("paired encoders must share the bottleneck size")

        self.encoder_primary = Encoder(spec_primary, enc_out)
        self.encoder_auxiliary = Encoder(spec_auxiliary, enc_out) if mode != "single" else None
        self.decoder_primary = Decoder(spec_primary, self.latent.total) if mode == "jade" else None
        self.decoder_auxiliary = Decoder(spec_auxiliary, self.latent.total) if mode == "jade" else None
        self.classifier_shared = SharedClassifier(
            cls_in, spec_primary.mlp_width, spec_primary.mlp_blocks, spec_primary.dropout_p
        )
        for name, child in self.named_children():
            _init_uniform_(child, _derived_seed(seed, name))

    def _spec(self, domain: str) -> ArchSpec:
        if domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}, got {domain!r}")
        if domain == "auxiliary" and self.mode == "single":
            raise ValueError("single mode has no auxiliary encoder")
        return self.spec_primary if domain == "primary" else self.spec_auxiliary

    def encode(self, domain: str, batch: Tensor) -> EncoderOutput:
        spec = self._spec(domain)
        h, w, c = spec.input_shape
        if batch.dim() != 4 or tuple(batch.shape[1:]) != (c, h, w):
            raise ValueError(f"{domain} batch must have shape (B, {c}, {h}, {w}), got {tuple(batch.shape)}")
        encoder = self.encoder_primary if domain == "primary" else self.encoder_auxiliary
        out = encoder(batch)
        if self.mode == "jade":
            mean, log_var = out.chunk(2, dim=1)
            return EncoderOutput(DiagGaussian(mean, log_var), spec.feature_shape)
        # point mass: log-variance pinned at the clamp floor
        return EncoderOutput(
            DiagGaussian(out, torch.full_like(out, -LOG_VAR_BOUND)), spec.feature_shape, deterministic=True
        )

    def decode(self, domain: str, z: Tensor) -> Tensor:
        if self.mode != "jade":
            raise ValueError(f"decode is only available in jade mode, bundle is {self.mode}")
        self._spec(domain)
        if z.dim() != 2 or z.shape[1] != self.latent.total:
            raise ValueError(f"z must have shape (B, {self.latent.total}), got {tuple(z.shape)}")
        decoder = self.decoder_primary if domain == "primary" else self.decoder_auxiliary
        return decoder(z)

    def classify_logits(
        self, content_code: Tensor, train_mode: bool = False, generator: torch.Generator | None = None
    ) -> Tensor:
        return self.classifier_shared(content_code, train_mode=train_mode, generator=generator)

    def content_code(self, domain: str, batch: Tensor) -> Tensor:
        """Deterministic classifier input: bottleneck code or content posterior mean."""
        out = self.encode(domain, batch)
        return out.split(self.latent)[1].mean

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(
    mode: str, spec_primary: ArchSpec, spec_auxiliary: ArchSpec | None = None, seed: int = 0
) -> ModelBundle:
    """Deterministically initialized bundle; each sub-network is seeded from (seed, name)."""
    return ModelBundle(mode, spec_primary, spec_auxiliary, seed)


def parameter_count(bundle: ModelBundle) -> int:
    return bundle.parameter_count()
