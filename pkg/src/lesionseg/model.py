"""U-Net with a configurable encoder scale and a single-logit head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .lesions import LesionType
from .numerics import (
    NonFiniteError,
    ShapeError,
    Tensor,
    WeightFormatError,
    batchnorm2d,
    concat_channels,
    conv2d,
    dropout,
    load_weights_file,
    maxpool2,
    relu,
    save_weights_file,
    upsample2,
)

DEPTH = 5


@dataclass(frozen=True)
class EncoderPreset:
    name: str
    stage_channels: tuple[int, ...]
    blocks_per_stage: tuple[int, ...]
    decoder_channels: tuple[int, ...] = (256, 128, 64, 32, 16)

    def __post_init__(self):
        if len(self.stage_channels) != DEPTH or len(self.blocks_per_stage) != DEPTH:
            raise ValueError(f"preset {self.name!r} must define {DEPTH} encoder stages")
        if len(self.decoder_channels) != DEPTH:
            raise ValueError(f"preset {self.name!r} must define {DEPTH} decoder stages")
        if any(b > a for a, b in zip(self.stage_channels[1:], self.stage_channels)):
            raise ValueError(f"preset {self.name!r}: stage channels must be non-decreasing")
        if min(self.blocks_per_stage) < 1:
            raise ValueError(f"preset {self.name!r}: every stage needs at least one block")


PRESETS: dict[str, EncoderPreset] = {
    # desk-scale preset; narrower decoder keeps CPU training to seconds per epoch
    "small": EncoderPreset("small", (8, 16, 32, 64, 128), (1, 1, 1, 1, 1), (32, 16, 8, 8, 4)),
    # stage widths of EfficientNet-B0/B2 at the five reduction points; depth from
    # the per-stage MBConv repeat counts (B2 uses the 1.2 depth multiplier)
    "b0_like": EncoderPreset("b0_like", (16, 24, 40, 112, 320), (1, 2, 2, 6, 5)),
    "b2_like": EncoderPreset("b2_like", (16, 24, 48, 120, 352), (2, 3, 3, 8, 7)),
}


def get_preset(preset: str | EncoderPreset) -> EncoderPreset:
    if isinstance(preset, EncoderPreset):
        return preset
    try:
        return PRESETS[preset]
    except KeyError:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None


class Conv2d:
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, bias: bool = False):
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = Tensor((rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True) if bias else None
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)

    def named_tensors(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


class BatchNorm2d:
    def __init__(self, c: int):
        self.weight = Tensor(np.ones(c, np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(c, np.float32), requires_grad=True)
        self.running_mean = np.zeros(c, np.float32)
        self.running_var = np.ones(c, np.float32)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var, training)

    def named_tensors(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias

    def named_buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


class ConvBNReLU:
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv = Conv2d(cin, cout, 3, rng)
        self.bn = BatchNorm2d(cout)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return relu(self.bn(self.conv(x), training))

    def named_tensors(self, prefix: str):
        yield from self.conv.named_tensors(f"{prefix}.conv")
        yield from self.bn.named_tensors(f"{prefix}.bn")

    def named_buffers(self, prefix: str):
        yield from self.bn.named_buffers(f"{prefix}.bn")


class SegModel:
    """Encoder of five pool-then-convolve stages, mirrored decoder with skips.

    Encoder stage ``i`` runs at 1/2**(i+1) of the input resolution. Decoder
    stage ``j`` upsamples, concatenates encoder stage ``3 - j`` (none for the
    last, full-resolution stage) and applies two conv-BN-ReLU blocks.
    """

    def __init__(
        self,
        preset: str | EncoderPreset = "small",
        dropout_rate: float = 0.0,
        init_seed: int = 0,
        lesion: LesionType | str | None = None,
        in_channels: int = 3,
    ):
        self.preset = get_preset(preset)
        self.dropout_rate = float(dropout_rate)
        self.init_seed = int(init_seed)
        self.lesion = LesionType.parse(lesion) if lesion is not None else None
        self.training = True
        rng = np.random.default_rng(self.init_seed)
        self._dropout_rng = np.random.default_rng([self.init_seed, 1])

        self.encoder: list[list[ConvBNReLU]] = []
        cin = in_channels
        for cout, nblocks in zip(self.preset.stage_channels, self.preset.blocks_per_stage):
            stage = []
            for _ in range(nblocks):
                stage.append(ConvBNReLU(cin, cout, rng))
                cin = cout
            self.encoder.append(stage)

        skips = list(self.preset.stage_channels[-2::-1]) + [0]
        self.decoder: list[tuple[ConvBNReLU, ConvBNReLU]] = []
        for skip, cout in zip(skips, self.preset.decoder_channels):
            self.decoder.append((ConvBNReLU(cin + skip, cout, rng), ConvBNReLU(cout, cout, rng)))
            cin = cout
        self.head = Conv2d(cin, 1, 1, rng, bias=True)

    # -- mode -----------------------------------------------------------------

    def train(self) -> "SegModel":
        self.training = True
        return self

    def eval(self) -> "SegModel":
        self.training = False
        return self

    # -- parameters -----------------------------------------------------------

    def _blocks(self):
        for i, stage in enumerate(self.encoder):
            for j, block in enumerate(stage):
                yield f"encoder.{i}.{j}", block
        for i, pair in enumerate(self.decoder):
            for j, block in enumerate(pair):
                yield f"decoder.{i}.{j}", block

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, block in self._blocks():
            out.update(block.named_tensors(prefix))
        out.update(self.head.named_tensors("head"))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, block in self._blocks():
            out.update(block.named_buffers(prefix))
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.named_parameters().items()}
        state.update({k: b.copy() for k, b in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Replace parameters and buffers; validates everything before mutating."""
        params, buffers = self.named_parameters(), self.named_buffers()
        expected = {k: p.shape for k, p in params.items()}
        expected.update({k: b.shape for k, b in buffers.items()})
        problems = []
        for name, shape in expected.items():
            if name not in state:
                problems.append(f"{name}: missing")
            elif tuple(state[name].shape) != tuple(shape):
                problems.append(f"{name}: expected shape {tuple(shape)}, got {tuple(state[name].shape)}")
        problems.extend(f"{name}: unexpected" for name in state if name not in expected)
        if problems:
            raise WeightFormatError("weight mismatch: " + "; ".join(problems))
        for name, p in params.items():
            p.data = np.array(state[name], dtype=np.float32)
        for name, b in buffers.items():
            b[...] = state[name]

    # -- forward --------------------------------------------------------------

    def __call__(self, images: Tensor, mode: str | None = None, zero_skip: int | None = None) -> Tensor:
        return self.forward(images, mode, zero_skip)

    def forward(self, images: Tensor, mode: str | None = None, zero_skip: int | None = None) -> Tensor:
        """Logits of shape (B, 1, H, W).

        ``mode`` overrides the model's train/eval flag for this call.
        ``zero_skip`` replaces the given decoder stage's skip input by zeros.
        """
        if mode not in (None, "train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        training = self.training if mode is None else mode == "train"
        if images.ndim != 4:
            raise ShapeError(f"expected images of shape (B, C, H, W), got {images.shape}")
        h, w = images.shape[2:]
        factor = 2**DEPTH
        if h % factor or w % factor:
            raise ShapeError(f"input size {h}x{w} must be divisible by {factor}")

        x = images
        feats = []
        for i, stage in enumerate(self.encoder):
            x = maxpool2(x)
            for block in stage:
                x = block(x, training)
            _finite(x, f"encoder stage {i}")
            feats.append(x)

        skips = feats[-2::-1]
        for j, (b1, b2) in enumerate(self.decoder):
            x = upsample2(x)
            if j < len(skips):
                skip = skips[j]
                if zero_skip == j:
                    skip = Tensor(np.zeros_like(skip.data))
                x = concat_channels(x, skip)
            x = b2(b1(x, training), training)
            _finite(x, f"decoder stage {j}")

        x = dropout(x, self.dropout_rate, training, self._dropout_rng)
        logits = self.head(x)
        _finite(logits, "head")
        return logits


def _finite(x: Tensor, where: str) -> None:
    if not np.isfinite(x.data).all():
        raise NonFiniteError(f"non-finite activations in {where}")


def build(
    preset: str | EncoderPreset = "small",
    dropout_rate: float = 0.0,
    init_seed: int = 0,
    lesion: LesionType | str | None = None,
) -> SegModel:
    return SegModel(preset, dropout_rate, init_seed, lesion)


def save_weights(model: SegModel, path, manifest: dict | None = None) -> None:
    """Write LSEG1 weights and a JSON manifest next to them (``<path>.json``)."""
    path = Path(path)
    save_weights_file(model.state_dict(), path)
    info = {
        "preset": asdict(model.preset),
        "lesion": model.lesion.value if model.lesion else None,
        "dropout_rate": model.dropout_rate,
        "init_seed": model.init_seed,
    }
    info.update(manifest or {})
    manifest_path(path).write_text(json.dumps(info, indent=2, sort_keys=True))


def load_weights(model: SegModel, path) -> SegModel:
    model.load_state_dict(load_weights_file(path))
    return model


def manifest_path(weights_path) -> Path:
    weights_path = Path(weights_path)
    return weights_path.with_name(weights_path.name + ".json")


def model_from_manifest(weights_path) -> tuple[SegModel, dict]:
    """Rebuild the model described by a weight file's manifest and load it."""
    info = json.loads(manifest_path(weights_path).read_text())
    p = info["preset"]
    preset = EncoderPreset(
        p["name"], tuple(p["stage_channels"]), tuple(p["blocks_per_stage"]), tuple(p["decoder_channels"])
    )
    model = SegModel(preset, info.get("dropout_rate", 0.0), info.get("init_seed", 0), info.get("lesion"))
    load_weights(model, weights_path)
    return model.eval(), info


__all__ = [
    "PRESETS",
    "EncoderPreset",
    "SegModel",
    "build",
    "get_preset",
    "load_weights",
    "model_from_manifest",
    "save_weights",
]
