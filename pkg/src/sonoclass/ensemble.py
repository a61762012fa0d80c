"""Two-scale, two-branch convolutional ensemble.

An input image is resized to a low-resolution copy for a small "shallow"
backbone and a high-resolution copy for a deeper "detailed" backbone.  Each
branch ends in global average pooling; the pooled vectors are concatenated
and fed to dense classification layers.  Backbones are stacks of
conv -> ReLU -> optional 2x2 average pool stages.

Checkpoints use a little-endian binary container: magic ``ENSM``, a u32
version, a u32 array count, then per array a u16 name length, the utf-8
name, a u8 rank, u32 extents, and float32 row-major data.  Reserved
``__meta__/config`` and ``__raw64__/...`` arrays carry a JSON config echo
and exact float64 training state encoded as byte values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .image import RasterImage, bilinear_resize, bilinear_resize_batch

__all__ = [
    "EnsembleConfigError",
    "CheckpointError",
    "CheckpointMagicError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "ConvStage",
    "BackboneSpec",
    "EnsembleConfig",
    "build_ensemble",
    "ensemble_forward",
    "forward_scaled",
    "prepare_inputs",
    "predict",
    "softmax",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointData",
]


class EnsembleConfigError(ValueError):
    """Raised for invalid backbone or ensemble configurations."""


@dataclass(frozen=True)
class ConvStage:
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    pool: bool = True

    def __post_init__(self):
        if self.out_channels < 1 or self.kernel_size < 1 or self.stride < 1:
            raise EnsembleConfigError(f"invalid conv stage {self}")


@dataclass(frozen=True)
class BackboneSpec:
    """Ordered conv stages; ReLU activation throughout."""

    stages: tuple[ConvStage, ...]

    def __post_init__(self):
        if not self.stages:
            raise EnsembleConfigError("a backbone needs at least one stage")
        object.__setattr__(self, "stages", tuple(self.stages))

    @property
    def out_channels(self) -> int:
        return self.stages[-1].out_channels

    @classmethod
    def from_channels(cls, channels, pool_last: bool = False) -> "BackboneSpec":
        stages = [
            ConvStage(c, pool=(i < len(channels) - 1 or pool_last))
            for i, c in enumerate(channels)
        ]
        return cls(tuple(stages))

    def label(self) -> str:
        return "-".join(str(s.out_channels) for s in self.stages)


def default_shallow() -> BackboneSpec:
    return BackboneSpec.from_channels((8, 16, 32), pool_last=True)


def default_detailed() -> BackboneSpec:
    return BackboneSpec.from_channels((8, 16, 32, 64, 64), pool_last=False)


@dataclass(frozen=True)
class EnsembleConfig:
    class_count: int
    shallow_input: tuple[int, int] = (32, 32)
    detailed_input: tuple[int, int] = (64, 64)
    shallow_backbone: BackboneSpec = field(default_factory=default_shallow)
    detailed_backbone: BackboneSpec = field(default_factory=default_detailed)
    classifier_hidden: tuple[int, ...] = ()
    in_channels: int = 3
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.class_count < 2:
            raise EnsembleConfigError("class_count must be >= 2")
        hs, ws = self.shallow_input
        hd, wd = self.detailed_input
        if min(hs, ws, hd, wd) < 1:
            raise EnsembleConfigError("input extents must be positive")
        if hd * wd <= hs * ws:
            raise EnsembleConfigError(
                "the detailed branch must see strictly more pixels than the "
                f"shallow branch (got {hs}x{ws} vs {hd}x{wd})"
            )
        if self.in_channels not in (1, 3):
            raise EnsembleConfigError("in_channels must be 1 or 3")
        if self.class_names is not None and len(self.class_names) != self.class_count:
            raise EnsembleConfigError("class_names length must equal class_count")

    @property
    def fused_dim(self) -> int:
        return self.shallow_backbone.out_channels + self.detailed_backbone.out_channels

    def architecture_label(self) -> str:
        hs, ws = self.shallow_input
        hd, wd = self.detailed_input
        return (
            f"shallow[{self.shallow_backbone.label()}]@{hs}x{ws}"
            f"+detailed[{self.detailed_backbone.label()}]@{hd}x{wd}"
        )

    def to_dict(self) -> dict:
        return {
            "class_count": self.class_count,
            "shallow_input": list(self.shallow_input),
            "detailed_input": list(self.detailed_input),
            "shallow_stages": [
                [s.out_channels, s.kernel_size, s.stride, int(s.pool)]
                for s in self.shallow_backbone.stages
            ],
            "detailed_stages": [
                [s.out_channels, s.kernel_size, s.stride, int(s.pool)]
                for s in self.detailed_backbone.stages
            ],
            "classifier_hidden": list(self.classifier_hidden),
            "in_channels": self.in_channels,
            "class_names": list(self.class_names) if self.class_names else None,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "EnsembleConfig":
        def spec(rows):
            return BackboneSpec(
                tuple(ConvStage(c, k, s, bool(p)) for c, k, s, p in rows)
            )

        return cls(
            class_count=int(payload["class_count"]),
            shallow_input=tuple(payload["shallow_input"]),
            detailed_input=tuple(payload["detailed_input"]),
            shallow_backbone=spec(payload["shallow_stages"]),
            detailed_backbone=spec(payload["detailed_stages"]),
            classifier_hidden=tuple(payload.get("classifier_hidden", ())),
            in_channels=int(payload.get("in_channels", 3)),
            class_names=(
                tuple(payload["class_names"]) if payload.get("class_names") else None
            ),
        )


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _stage_params(config: EnsembleConfig):
    """Canonical (name, shape, fan_in) listing for every parameter."""
    listing = []
    for branch, spec in (
        ("shallow", config.shallow_backbone),
        ("detailed", config.detailed_backbone),
    ):
        c_in = config.in_channels
        for i, stage in enumerate(spec.stages):
            k = stage.kernel_size
            listing.append(
                (f"{branch}.stage{i}.weight", (stage.out_channels, c_in, k, k), c_in * k * k)
            )
            listing.append((f"{branch}.stage{i}.bias", (stage.out_channels,), 0))
            c_in = stage.out_channels
    dims = [config.fused_dim, *config.classifier_hidden, config.class_count]
    for i in range(len(dims) - 1):
        listing.append((f"head.{i}.weight", (dims[i + 1], dims[i]), dims[i]))
        listing.append((f"head.{i}.bias", (dims[i + 1],), 0))
    return listing


def build_ensemble(config: EnsembleConfig, init_seed: int = 0) -> dict[str, ad.Tensor]:
    """Fan-in-scaled uniform weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng([int(init_seed), 424243])
    params: dict[str, ad.Tensor] = {}
    for name, shape, fan_in in _stage_params(config):
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = ad.Tensor(data, requires_grad=True, name=name)
    return params


def _check_params(params: dict[str, ad.Tensor], config: EnsembleConfig) -> None:
    for name, shape, _ in _stage_params(config):
        if name not in params:
            raise EnsembleConfigError(f"parameter {name!r} missing for this config")
        if params[name].shape != shape:
            raise EnsembleConfigError(
                f"parameter {name!r} has shape {params[name].shape}, "
                f"config expects {shape}"
            )


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _branch_forward(
    params: dict[str, ad.Tensor], branch: str, spec: BackboneSpec, x: ad.Tensor
) -> ad.Tensor:
    for i, stage in enumerate(spec.stages):
        x = ad.conv2d(
            x,
            params[f"{branch}.stage{i}.weight"],
            params[f"{branch}.stage{i}.bias"],
            stride=stage.stride,
            padding=stage.kernel_size // 2,
        )
        x = ad.relu(x)
        if stage.pool:
            x = ad.avg_pool2(x)
    return x


def forward_scaled(
    params: dict[str, ad.Tensor],
    config: EnsembleConfig,
    x_shallow: ad.Tensor,
    x_detailed: ad.Tensor,
) -> ad.Tensor:
    """Logits from pre-resized N x C x H x W branch inputs."""
    fs = _branch_forward(params, "shallow", config.shallow_backbone, x_shallow)
    fd = _branch_forward(params, "detailed", config.detailed_backbone, x_detailed)
    fused = ad.concat_channels(ad.global_average_pool(fs), ad.global_average_pool(fd))
    n_dense = len(config.classifier_hidden) + 1
    out = fused
    for i in range(n_dense):
        out = ad.dense(out, params[f"head.{i}.weight"], params[f"head.{i}.bias"])
        if i < n_dense - 1:
            out = ad.relu(out)
    return out


def _to_model_channels(pixels: np.ndarray, in_channels: int) -> np.ndarray:
    if pixels.shape[2] == in_channels:
        return pixels
    if pixels.shape[2] == 1 and in_channels == 3:
        return np.repeat(pixels, 3, axis=2)
    if pixels.shape[2] == 3 and in_channels == 1:
        from .image import luma

        return luma(pixels)[:, :, None]
    raise EnsembleConfigError(
        f"cannot feed a {pixels.shape[2]}-channel image to a "
        f"{in_channels}-channel model"
    )


def prepare_inputs(
    images, config: EnsembleConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Resize a batch of images to both scales, as N x C x H x W arrays."""
    hs, ws = config.shallow_input
    hd, wd = config.detailed_input
    stacked = []
    uniform = True
    for img in images:
        pixels = img.pixels if isinstance(img, RasterImage) else np.asarray(img, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        pixels = _to_model_channels(pixels, config.in_channels)
        if stacked and pixels.shape != stacked[0].shape:
            uniform = False
        stacked.append(pixels)
    if uniform and len(stacked) > 1:
        batch = np.stack(stacked)
        # Plain transposed views: the first conv's padding copy absorbs the
        # layout change, so forcing contiguity here would be a wasted pass.
        xs = bilinear_resize_batch(batch, hs, ws).transpose(0, 3, 1, 2)
        xd = bilinear_resize_batch(batch, hd, wd).transpose(0, 3, 1, 2)
        return xs, xd
    xs = [bilinear_resize(p, hs, ws).transpose(2, 0, 1) for p in stacked]
    xd = [bilinear_resize(p, hd, wd).transpose(2, 0, 1) for p in stacked]
    return np.stack(xs), np.stack(xd)


def ensemble_forward(
    params: dict[str, ad.Tensor], config: EnsembleConfig, image
) -> np.ndarray:
    """Logits for one image (length K) or a sequence of images (N x K)."""
    _check_params(params, config)
    single = isinstance(image, RasterImage) or (
        isinstance(image, np.ndarray) and image.ndim in (2, 3)
    )
    batch = [image] if single else list(image)
    xs, xd = prepare_inputs(batch, config)
    logits = forward_scaled(params, config, ad.Tensor(xs), ad.Tensor(xd)).data
    return logits[0] if single else logits


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict(
    params: dict[str, ad.Tensor], config: EnsembleConfig, image
) -> tuple[int, np.ndarray]:
    """(argmax class, softmax probabilities); ties go to the lowest index."""
    logits = ensemble_forward(params, config, image)
    probs = softmax(logits)
    return int(np.argmax(probs)), probs


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"ENSM"
CHECKPOINT_VERSION = 1
_CONFIG_KEY = "__meta__/config"
_RAW64_PREFIX = "__raw64__/"


class CheckpointError(RuntimeError):
    """Base class for checkpoint container problems."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class CheckpointData:
    params: dict[str, np.ndarray]  # float64 arrays holding f32-exact values
    config: dict | None
    extras: dict[str, np.ndarray]  # exact float64 payloads


def _bytes_as_f32_array(blob: bytes) -> np.ndarray:
    return np.frombuffer(blob, dtype=np.uint8).astype(np.float32)


def _f32_array_as_bytes(arr: np.ndarray) -> bytes:
    return np.asarray(arr, dtype=np.float32).astype(np.uint8).tobytes()


def save_checkpoint(
    params: dict[str, np.ndarray | ad.Tensor],
    path,
    config: dict | None = None,
    extras: dict[str, np.ndarray] | None = None,
) -> None:
    """Write parameters (stored float32) plus optional config echo and exact
    float64 extras (optimizer moments, counters) to ``path``."""
    arrays: list[tuple[str, np.ndarray]] = []
    for name, value in params.items():
        data = value.data if isinstance(value, ad.Tensor) else np.asarray(value)
        arrays.append((name, data.astype("<f4")))
    if config is not None:
        blob = json.dumps(config, sort_keys=True).encode("utf-8")
        arrays.append((_CONFIG_KEY, _bytes_as_f32_array(blob)))
    if extras:
        for name, value in extras.items():
            blob = np.ascontiguousarray(value, dtype="<f8").tobytes()
            arrays.append((_RAW64_PREFIX + name, _bytes_as_f32_array(blob)))

    names = [n for n, _ in arrays]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate array names in checkpoint")

    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arrays))]
    for name, data in arrays:
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"array name too long: {name!r}")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path) -> CheckpointData:
    """Read a checkpoint container; raises distinct errors for a bad magic,
    an unsupported version, and truncation."""
    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob)
    magic = reader.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"bad checkpoint magic {magic!r}")
    version, count = struct.unpack("<II", reader.take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    params: dict[str, np.ndarray] = {}
    config = None
    extras: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", reader.take(2))
        name = reader.take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", reader.take(1))
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank)) if rank else ()
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape)
        if name == _CONFIG_KEY:
            config = json.loads(_f32_array_as_bytes(data).decode("utf-8"))
        elif name.startswith(_RAW64_PREFIX):
            extras[name[len(_RAW64_PREFIX) :]] = np.frombuffer(
                _f32_array_as_bytes(data), dtype="<f8"
            ).copy()
        else:
            params[name] = data.astype(np.float64)
    return CheckpointData(params=params, config=config, extras=extras)
