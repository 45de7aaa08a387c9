"""Generator and discriminator function families plus model state handling.

Generators are encoder-decoder nets with skip connections (channel widths
doubling up to an 8x cap, 4x4 stride-2 convolutions, output squashed from
[-1, 1] into [0, 1]). The discriminator is a patch classifier: three
stride-2 stages, one stride-1 stage and a 1-channel sigmoid score head,
giving each output score a 70x70 receptive field at the reference width.

All randomness (weight init, per-iteration dropout) is derived from
explicit seeds so that runs, resumes and re-runs are bit-identical.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .exceptions import (
    CheckpointMismatchError,
    ConfigError,
    DimensionError,
    ParameterError,
)
from .types import TrainConfig

CHECKPOINT_VERSION = 1
WIDTH_CAP_FACTOR = 8
INIT_STD = 0.02


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary labelled parts (platform independent)."""
    text = ":".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


def stage_widths(base_width: int, levels: int) -> list[int]:
    """Channel width per encoder stage: doubling, capped at 8x the base."""
    return [min(base_width * 2**k, base_width * WIDTH_CAP_FACTOR) for k in range(levels)]


def _norm_layer(kind: str, channels: int) -> nn.Module | None:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=False, track_running_stats=False)
    if kind == "none":
        return None
    raise ConfigError(f"unknown norm {kind!r}")


class UNetGenerator(nn.Module):
    """Symmetric encoder-decoder with skip connections; output in [0, 1].

    ``levels`` stride-2 stages halve the spatial extent down to the
    bottleneck, so inputs must be divisible by 2**levels. Dropout (p=0.5)
    is applied on the innermost decoder stages during training only.
    """

    def __init__(
        self,
        levels: int = 8,
        base_width: int = 64,
        in_channels: int = 3,
        out_channels: int = 3,
        norm: str = "batch",
        dropout_stages: int = 3,
        dropout_p: float = 0.5,
    ):
        super().__init__()
        if levels < 2:
            raise ParameterError("generator needs at least 2 levels")
        widths = stage_widths(base_width, levels)
        self.levels = levels
        self.widths = widths

        enc = [nn.Conv2d(in_channels, widths[0], 4, 2, 1)]
        for k in range(1, levels):
            block: list[nn.Module] = [
                nn.LeakyReLU(0.2, inplace=False),
                nn.Conv2d(widths[k - 1], widths[k], 4, 2, 1),
            ]
            if k < levels - 1:  # bottleneck stage carries no norm
                layer = _norm_layer(norm, widths[k])
                if layer is not None:
                    block.append(layer)
            enc.append(nn.Sequential(*block))
        self.encoder = nn.ModuleList(enc)

        dec = []
        n_dropout = min(dropout_stages, levels - 1)
        for k in range(levels):
            inner = k == 0
            outer = k == levels - 1
            in_ch = widths[levels - 1] if inner else 2 * widths[levels - 1 - k]
            out_ch = out_channels if outer else widths[levels - 2 - k]
            block = [nn.ReLU(inplace=False), nn.ConvTranspose2d(in_ch, out_ch, 4, 2, 1)]
            if not outer:
                layer = _norm_layer(norm, out_ch)
                if layer is not None:
                    block.append(layer)
                if k < n_dropout:
                    block.append(nn.Dropout(dropout_p))
            dec.append(nn.Sequential(*block))
        self.decoder = nn.ModuleList(dec)

    def _check_size(self, x: torch.Tensor) -> None:
        if x.dim() != 4:
            raise DimensionError(f"expected NCHW input, got shape {tuple(x.shape)}")
        stride = 2**self.levels
        h, w = x.shape[2], x.shape[3]
        if h < stride or w < stride or h % stride or w % stride:
            raise DimensionError(
                f"input {h}x{w} not supported by the {self.levels}-level structure; "
                f"both sides must be multiples of {stride} and >= {stride}"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_size(x)
        feats = []
        out = x
        for block in self.encoder:
            out = block(out)
            feats.append(out)
        out = self.decoder[0](feats[-1])
        for k in range(1, self.levels):
            out = self.decoder[k](torch.cat([out, feats[self.levels - 1 - k]], dim=1))
        return (torch.tanh(out) + 1.0) / 2.0


class PatchDiscriminator(nn.Module):
    """Conditional patch classifier over (conditioning, candidate) pairs.

    Inputs are channel-concatenated (6 channels for RGB pairs). The score
    map carries one sigmoid probability per overlapping receptive-field
    patch.
    """

    def __init__(
        self,
        in_channels: int = 6,
        base_width: int = 64,
        n_down: int = 3,
        norm: str = "batch",
    ):
        super().__init__()
        if n_down < 1:
            raise ParameterError("discriminator needs at least one stride-2 stage")
        widths = stage_widths(base_width, n_down + 1)
        self.n_down = n_down
        layers: list[nn.Module] = [
            nn.Conv2d(in_channels, widths[0], 4, 2, 1),
            nn.LeakyReLU(0.2, inplace=False),
        ]
        for k in range(1, n_down):
            layers.append(nn.Conv2d(widths[k - 1], widths[k], 4, 2, 1))
            layer = _norm_layer(norm, widths[k])
            if layer is not None:
                layers.append(layer)
            layers.append(nn.LeakyReLU(0.2, inplace=False))
        layers.append(nn.Conv2d(widths[n_down - 1], widths[n_down], 4, 1, 1))
        layer = _norm_layer(norm, widths[n_down])
        if layer is not None:
            layers.append(layer)
        layers.append(nn.LeakyReLU(0.2, inplace=False))
        layers.append(nn.Conv2d(widths[n_down], 1, 4, 1, 1))
        self.body = nn.Sequential(*layers)

    def score_map_size(self, size: int) -> int:
        out = size
        for _ in range(self.n_down):
            out = (out + 2 - 4) // 2 + 1
        out = out - 1  # stride-1 stage
        out = out - 1  # score head
        return out

    def forward(self, conditioning: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        if conditioning.shape != candidate.shape:
            raise DimensionError(
                f"conditioning {tuple(conditioning.shape)} and candidate "
                f"{tuple(candidate.shape)} must share shape"
            )
        if conditioning.dim() != 4:
            raise DimensionError("expected NCHW inputs")
        h, w = conditioning.shape[2], conditioning.shape[3]
        if self.score_map_size(h) < 1 or self.score_map_size(w) < 1:
            raise DimensionError(f"input {h}x{w} too small for the conv stack")
        return torch.sigmoid(self.body(torch.cat([conditioning, candidate], dim=1)))


def init_weights(module: nn.Module, seed: int) -> None:
    """Seeded zero-mean Gaussian init (std 0.02) for convs; norm gain ~N(1, 0.02)."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            m.weight.data.normal_(0.0, INIT_STD, generator=gen)
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            m.weight.data.normal_(1.0, INIT_STD, generator=gen)
            m.bias.data.zero_()


@dataclass
class ModelState:
    """All trainable state of a run: modules, optimizers, iteration counter.

    Single-writer during training; clone via checkpoint round-trip for
    concurrent read-only inference.
    """

    config: TrainConfig
    generators: list[UNetGenerator]
    discriminators: list[PatchDiscriminator]
    gen_optimizers: list[torch.optim.Adam]
    disc_optimizers: list[torch.optim.Adam]
    iteration: int = 0

    @property
    def n_sources(self) -> int:
        return len(self.generators)

    def parameter_counts(self) -> dict:
        return {
            "generators": [sum(p.numel() for p in g.parameters()) for g in self.generators],
            "discriminators": [
                sum(p.numel() for p in d.parameters()) for d in self.discriminators
            ],
        }

    def eval_mode(self) -> None:
        for m in self.generators + self.discriminators:
            m.eval()

    def train_mode(self) -> None:
        for m in self.generators + self.discriminators:
            m.train()


def _n_discriminators(config: TrainConfig) -> int:
    if config.coupling_mode == "coupled":
        return 1
    if config.coupling_mode == "independent_gans":
        return config.n_sources
    return 0  # l1_only: adversarial loss permanently disabled


def init_model(config: TrainConfig, seed: int | None = None) -> ModelState:
    """Build and deterministically initialize all modules and optimizers."""
    seed = config.seed if seed is None else seed
    generators = []
    for i in range(config.n_sources):
        g = UNetGenerator(
            levels=config.levels,
            base_width=config.base_width,
            norm=config.norm,
        )
        init_weights(g, derive_seed(seed, "generator", i))
        generators.append(g)
    discriminators = []
    for j in range(_n_discriminators(config)):
        d = PatchDiscriminator(base_width=config.base_width, norm=config.norm)
        init_weights(d, derive_seed(seed, "discriminator", j))
        discriminators.append(d)
    betas = (config.momentum1, config.momentum2)
    gen_opts = [
        torch.optim.Adam(g.parameters(), lr=config.learning_rate, betas=betas)
        for g in generators
    ]
    disc_opts = [
        torch.optim.Adam(d.parameters(), lr=config.learning_rate, betas=betas)
        for d in discriminators
    ]
    return ModelState(
        config=config,
        generators=generators,
        discriminators=discriminators,
        gen_optimizers=gen_opts,
        disc_optimizers=disc_opts,
        iteration=0,
    )


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float image -> (1, 3, H, W) float32 tensor."""
    a = np.asarray(image, dtype=np.float32)
    if a.ndim != 3 or a.shape[2] != 3:
        raise DimensionError(f"expected (H, W, 3) image, got {a.shape}")
    return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)))[None]


def batch_to_tensor(images) -> torch.Tensor:
    return torch.cat([image_to_tensor(im) for im in images], dim=0)


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """(1, 3, H, W) or (3, H, W) tensor -> (H, W, 3) float64 image in [0, 1]."""
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise DimensionError("tensor_to_image expects a single image")
        t = t[0]
    arr = t.detach().cpu().double().numpy().transpose(1, 2, 0)
    return np.clip(arr, 0.0, 1.0)


def generator_forward(generator: UNetGenerator, mixed: np.ndarray) -> np.ndarray:
    """Inference-mode single-image forward (dropout off, deterministic)."""
    was_training = generator.training
    generator.eval()
    try:
        with torch.no_grad():
            out = generator(image_to_tensor(mixed))
    finally:
        generator.train(was_training)
    return tensor_to_image(out)


def discriminator_forward(
    discriminator: PatchDiscriminator, conditioning: np.ndarray, candidate: np.ndarray
) -> np.ndarray:
    """Inference-mode score map for one (conditioning, candidate) pair."""
    was_training = discriminator.training
    discriminator.eval()
    try:
        with torch.no_grad():
            scores = discriminator(
                image_to_tensor(conditioning), image_to_tensor(candidate)
            )
    finally:
        discriminator.train(was_training)
    return scores[0, 0].cpu().double().numpy()


def save_checkpoint(state: ModelState, path) -> None:
    """Serialize the full model state as a versioned binary container."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "iteration": state.iteration,
        "generators": [g.state_dict() for g in state.generators],
        "discriminators": [d.state_dict() for d in state.discriminators],
        "gen_optimizers": [o.state_dict() for o in state.gen_optimizers],
        "disc_optimizers": [o.state_dict() for o in state.disc_optimizers],
    }
    torch.save(payload, path)


def load_checkpoint(path, expected_config: TrainConfig | None = None) -> ModelState:
    """Rebuild a ModelState from disk; refuses config mismatches on resume."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(
            f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    config = TrainConfig.from_dict(payload["config"])
    if expected_config is not None and config != expected_config:
        diffs = [
            f"{key}: checkpoint={getattr(config, key)!r} vs requested={getattr(expected_config, key)!r}"
            for key in config.to_dict()
            if getattr(config, key) != getattr(expected_config, key)
        ]
        raise CheckpointMismatchError(
            "checkpoint was produced under a different configuration; refusing "
            "to resume. Differing fields: " + "; ".join(diffs)
        )
    state = init_model(config)
    for g, sd in zip(state.generators, payload["generators"]):
        g.load_state_dict(sd)
    for d, sd in zip(state.discriminators, payload["discriminators"]):
        d.load_state_dict(sd)
    for o, sd in zip(state.gen_optimizers, payload["gen_optimizers"]):
        o.load_state_dict(sd)
    for o, sd in zip(state.disc_optimizers, payload["disc_optimizers"]):
        o.load_state_dict(sd)
    state.iteration = int(payload["iteration"])
    return state
