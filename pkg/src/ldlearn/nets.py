"""Network definitions and checkpoint IO.

Three models: a U-shaped embedding network whose decoder forks into a
clustering branch (soft segmentation) and an embedding branch (unit
pixel vectors), a plain segmentation network sharing the same encoder and
decoder layout, and a small convolutional discriminator over masks.
"""

import io
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "ldlearn-ckpt-v1"
L2_EPS = 1e-8

# VGG16 convolutional stages: channel width and conv count per stage, with
# a 2x2 max pool between (and after) stages.
_VGG_STAGES = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))


@dataclass(frozen=True)
class NetworkConfig:
    """Width, head sizes and nominal input size of the backbone.

    ``width_divisor`` scales every VGG16 channel count down: 4 gives the
    tiny variant, 2 the small one, 1 the full-width network.
    """

    width_divisor: int = 4
    embed_dim: int = 16
    num_clusters: int = 16
    input_size: tuple[int, int] = (512, 512)
    in_channels: int = 3

    def __post_init__(self):
        if self.width_divisor < 1:
            raise ValueError("width_divisor must be a positive integer")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be at least 2")
        if self.num_clusters < 1:
            raise ValueError("num_clusters must be at least 1")
        h, w = self.input_size
        if h % 32 != 0 or w % 32 != 0:
            raise ValueError(f"input size {h}x{w} must be divisible by 32")
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")

    def stage_channels(self) -> list[int]:
        return [max(1, ch // self.width_divisor) for ch, _ in _VGG_STAGES]


@dataclass(frozen=True)
class DiscriminatorConfig:
    """Conv/FC layout of the mask discriminator (7 convs + 2 FC by default)."""

    conv_channels: tuple[int, ...] = (16, 32, 32, 32, 32, 32, 32)
    fc_sizes: tuple[int, ...] = (32, 1)
    leak: float = 0.2

    def __post_init__(self):
        if not self.conv_channels or any(c < 1 for c in self.conv_channels):
            raise ValueError("conv_channels must be positive integers")
        if len(self.fc_sizes) < 1 or self.fc_sizes[-1] != 1:
            raise ValueError("fc_sizes must end in a single output unit")
        if not 0.0 <= self.leak < 1.0:
            raise ValueError("leak slope must lie in [0, 1)")


def _conv_bn_relu(in_ch: int, out_ch: int) -> list[nn.Module]:
    return [
        nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    ]


class VggEncoder(nn.Module):
    """VGG16 conv stages (no FC part) with a width divisor.

    ``forward`` returns the bottom feature map (input/32) and the pre-pool
    activation of each stage for skip connections.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        chans = cfg.stage_channels()
        stages = []
        in_ch = cfg.in_channels
        for out_ch, (_, n_convs) in zip(chans, _VGG_STAGES):
            layers = []
            for _ in range(n_convs):
                layers += _conv_bn_relu(in_ch, out_ch)
                in_ch = out_ch
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)
        self.pool = nn.MaxPool2d(2)
        self.out_channels = chans[-1]
        self.skip_channels = chans

    def forward(self, x):
        skips = []
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = self.pool(x)
            x = stage(x)
            skips.append(x)
        return self.pool(x), skips


class DecoderBlock(nn.Module):
    """2x nearest upsampling, skip concatenation, then two convs."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.convs = nn.Sequential(
            *_conv_bn_relu(in_ch + skip_ch, out_ch), *_conv_bn_relu(out_ch, out_ch)
        )

    def forward(self, x, skip):
        x = self.up(x)
        return self.convs(torch.cat([x, skip], dim=1))


class BranchHead(nn.Module):
    """Final decoder stage: upsample to input size, fuse the first-stage
    skip, and project with two convs (the projection conv is linear)."""

    def __init__(self, in_ch: int, skip_ch: int, hidden_ch: int, out_ch: int):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.hidden = nn.Sequential(*_conv_bn_relu(in_ch + skip_ch, hidden_ch))
        self.project = nn.Conv2d(hidden_ch, out_ch, kernel_size=3, padding=1)

    def forward(self, x, skip):
        x = self.up(x)
        x = self.hidden(torch.cat([x, skip], dim=1))
        return self.project(x)


class VggDecoder(nn.Module):
    """Four upsampling blocks mirroring the encoder; heads attach on top."""

    def __init__(self, encoder: VggEncoder):
        super().__init__()
        sc = encoder.skip_channels  # e.g. [16, 32, 64, 128, 128]
        self.blocks = nn.ModuleList(
            [
                DecoderBlock(encoder.out_channels, sc[4], sc[4]),
                DecoderBlock(sc[4], sc[3], sc[3]),
                DecoderBlock(sc[3], sc[2], sc[2]),
                DecoderBlock(sc[2], sc[1], sc[1]),
            ]
        )
        self.head_in_channels = sc[1]
        self.head_skip_channels = sc[0]
        self.head_hidden_channels = sc[0]

    def forward(self, bottom, skips):
        x = bottom
        for block, skip in zip(self.blocks, reversed(skips[1:])):
            x = block(x, skip)
        return x, skips[0]


def _check_input_size(x: torch.Tensor):
    if x.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) input, got shape {tuple(x.shape)}")
    h, w = x.shape[2:]
    if h % 32 != 0 or w % 32 != 0:
        raise ValueError(f"input size {h}x{w} must be divisible by 32")


class EmbedNet(nn.Module):
    """Backbone with clustering and embedding branches.

    ``forward`` returns ``(v, r)``: unit pixel embeddings (N, K, H, W) and
    per-pixel class probabilities (N, C, H, W) on the channel simplex.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.config = cfg
        self.encoder = VggEncoder(cfg)
        self.decoder = VggDecoder(self.encoder)
        self.embed_head = BranchHead(
            self.decoder.head_in_channels,
            self.decoder.head_skip_channels,
            self.decoder.head_hidden_channels,
            cfg.embed_dim,
        )
        self.cluster_head = BranchHead(
            self.decoder.head_in_channels,
            self.decoder.head_skip_channels,
            self.decoder.head_hidden_channels,
            cfg.num_clusters,
        )

    def forward(self, x):
        _check_input_size(x)
        bottom, skips = self.encoder(x)
        feats, top_skip = self.decoder(bottom, skips)
        z = self.embed_head(feats, top_skip)
        v = z / (torch.linalg.vector_norm(z, dim=1, keepdim=True) + L2_EPS)
        r = torch.softmax(self.cluster_head(feats, top_skip), dim=1)
        return v, r


class SegNet(nn.Module):
    """Same encoder/decoder as :class:`EmbedNet` with a single sigmoid head."""

    def __init__(self, cfg: NetworkConfig, out_channels: int = 1):
        super().__init__()
        if out_channels < 1:
            raise ValueError("out_channels must be positive")
        self.config = cfg
        self.out_channels = out_channels
        self.encoder = VggEncoder(cfg)
        self.decoder = VggDecoder(self.encoder)
        self.head = BranchHead(
            self.decoder.head_in_channels,
            self.decoder.head_skip_channels,
            self.decoder.head_hidden_channels,
            out_channels,
        )

    def forward(self, x):
        _check_input_size(x)
        bottom, skips = self.encoder(x)
        feats, top_skip = self.decoder(bottom, skips)
        return torch.sigmoid(self.head(feats, top_skip))


class ShapeDiscriminator(nn.Module):
    """Conv stack over a probability mask ending in one sigmoid unit.

    Each conv is followed by a leaky rectifier and a 2x2 max pool, so the
    input must be at least 2^(number of convs) on each side.
    """

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.config = cfg
        convs = []
        in_ch = 1
        for out_ch in cfg.conv_channels:
            convs += [
                nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
                nn.LeakyReLU(cfg.leak, inplace=True),
                nn.MaxPool2d(2),
            ]
            in_ch = out_ch
        self.convs = nn.Sequential(*convs)
        fcs = []
        for size in cfg.fc_sizes[:-1]:
            fcs += [nn.Linear(in_ch, size), nn.LeakyReLU(cfg.leak, inplace=True)]
            in_ch = size
        fcs.append(nn.Linear(in_ch, cfg.fc_sizes[-1]))
        self.fcs = nn.Sequential(*fcs)

    def forward(self, mask):
        if mask.ndim != 4 or mask.shape[1] != 1:
            raise ValueError(f"expected (N, 1, H, W) mask, got shape {tuple(mask.shape)}")
        min_side = 2 ** len(self.config.conv_channels)
        if mask.shape[2] < min_side or mask.shape[3] < min_side:
            raise ValueError(
                f"mask spatial size {tuple(mask.shape[2:])} is below the "
                f"minimum {min_side} required by {len(self.config.conv_channels)} pooling layers"
            )
        x = self.convs(mask)
        x = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fcs(x)).squeeze(1)


def build_embed_net(cfg: NetworkConfig) -> EmbedNet:
    return EmbedNet(cfg)


def build_seg_net(cfg: NetworkConfig, out_channels: int = 1) -> SegNet:
    return SegNet(cfg, out_channels)


def build_discriminator(cfg: DiscriminatorConfig = DiscriminatorConfig()) -> ShapeDiscriminator:
    return ShapeDiscriminator(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def model_device(model) -> torch.device:
    """Device of a model's parameters (cpu for parameterless stubs)."""
    try:
        return next(model.parameters()).device
    except (AttributeError, StopIteration):
        return torch.device("cpu")


def transplant_encoder(source: nn.Module, target: nn.Module):
    """Copy encoder parameters and buffers from one backbone to another."""
    target.encoder.load_state_dict(source.encoder.state_dict())


# ----------------------------------------------------------------------
# Checkpoint IO: one npz archive of named arrays plus a JSON header.
# ----------------------------------------------------------------------

@dataclass
class Checkpoint:
    kind: str
    network: NetworkConfig
    arrays: dict
    meta: dict = field(default_factory=dict)

    def build(self) -> nn.Module:
        if self.kind == "embed":
            model = EmbedNet(self.network)
        elif self.kind == "seg":
            model = SegNet(self.network, int(self.meta.get("out_channels", 1)))
        elif self.kind == "discriminator":
            fields = json.loads(self.meta["discriminator"])
            model = ShapeDiscriminator(
                DiscriminatorConfig(
                    conv_channels=tuple(fields["conv_channels"]),
                    fc_sizes=tuple(fields["fc_sizes"]),
                    leak=fields["leak"],
                )
            )
        else:
            raise ValueError(f"unknown checkpoint kind {self.kind!r}")
        state = {name: torch.from_numpy(arr.copy()) for name, arr in self.arrays.items()}
        model.load_state_dict(state)
        return model


def save_checkpoint(path, model: nn.Module, kind: str, meta: dict | None = None,
                    extra_arrays: dict | None = None):
    """Write model state as a single archive of named arrays plus a header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(meta or {})
    if isinstance(model, ShapeDiscriminator):
        meta["discriminator"] = json.dumps(asdict(model.config))
        network = None
    else:
        network = asdict(model.config)
        network["input_size"] = list(network["input_size"])
    if isinstance(model, SegNet):
        meta["out_channels"] = model.out_channels
    header = {"format": CHECKPOINT_FORMAT, "kind": kind, "network": network, "meta": meta}
    payload = {"__header__": np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)}
    for name, tensor in model.state_dict().items():
        payload[f"param/{name}"] = tensor.detach().cpu().numpy()
    for name, arr in (extra_arrays or {}).items():
        payload[f"extra/{name}"] = np.asarray(arr)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(bytes(data["__header__"].tobytes()).decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(
                f"{path}: unsupported checkpoint format {header.get('format')!r}"
            )
        arrays = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
        extras = {k[len("extra/"):]: data[k] for k in data.files if k.startswith("extra/")}
    net_cfg = None
    if header["network"] is not None:
        fields = dict(header["network"])
        fields["input_size"] = tuple(fields["input_size"])
        net_cfg = NetworkConfig(**fields)
    meta = dict(header["meta"])
    if extras:
        meta["__extras__"] = extras
    return Checkpoint(kind=header["kind"], network=net_cfg, arrays=arrays, meta=meta)
