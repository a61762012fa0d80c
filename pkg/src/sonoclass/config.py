"""Run configuration: INI-style sections, schema validation, echoing.

Sections are ``data``, ``augment``, ``model``, ``loss``, ``optim``, ``eval``.
Every key is validated against the schema before any work starts; unknown
keys are rejected.  The effective configuration (file plus overrides) can be
echoed back as deterministic INI text.
"""

from __future__ import annotations

import configparser
import io
from pathlib import Path

from .augment import AugmentationConfig
from .ensemble import BackboneSpec, ConvStage, EnsembleConfig, EnsembleConfigError
from .losses import LOSS_KINDS, LossConfig

__all__ = ["ConfigError", "RunConfig", "parse_stages", "DEFAULTS"]


class ConfigError(ValueError):
    """Raised for unknown keys or invalid values in a run configuration."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().replace(" ", "").split("x")
    if len(parts) != 2:
        raise ValueError(f"expected HxW, got {text!r}")
    h, w = int(parts[0]), int(parts[1])
    if h < 1 or w < 1:
        raise ValueError(f"extents must be positive: {text!r}")
    return h, w


def parse_stages(text: str) -> BackboneSpec:
    """Parse stage tokens like ``8p,16k3s1p,32n``.

    Each token is CHANNELS, optionally ``k<int>`` kernel size, ``s<int>``
    stride, and a trailing ``p`` (2x2 average pool) or ``n`` (no pool).
    Pooling defaults to on.
    """
    stages = []
    for token in text.replace(" ", "").split(","):
        if not token:
            continue
        pool = True
        if token.endswith("p"):
            token = token[:-1]
        elif token.endswith("n"):
            pool = False
            token = token[:-1]
        kernel, stride = 3, 1
        if "s" in token:
            token, s_text = token.split("s", 1)
            stride = int(s_text)
        if "k" in token:
            token, k_text = token.split("k", 1)
            kernel = int(k_text)
        stages.append(ConvStage(int(token), kernel, stride, pool))
    if not stages:
        raise ValueError(f"no stages in {text!r}")
    return BackboneSpec(tuple(stages))


def _parse_floats(text: str) -> tuple[float, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(float(v) for v in text.split(","))


def _parse_ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(v) for v in text.split(","))


# key -> (parser, default-as-text, validator or None)
DEFAULTS: dict[str, tuple] = {
    "data.manifest": (str, "", None),
    "data.val_fraction": (float, "0.1", lambda v: 0.0 < v < 1.0),
    "data.test_fraction": (float, "0.1", lambda v: 0.0 < v < 1.0),
    "data.split_seed": (int, "0", None),
    "augment.enabled": (_parse_bool, "true", None),
    "augment.gamma_lo": (float, "0.7", lambda v: v > 0),
    "augment.gamma_hi": (float, "1.5", lambda v: v > 0),
    "augment.scale_lo": (float, "0.7", lambda v: 0 < v <= 1),
    "augment.scale_hi": (float, "1.0", lambda v: 0 < v <= 1),
    "augment.aspect_lo": (float, "0.9", lambda v: v > 0),
    "augment.aspect_hi": (float, "1.1", lambda v: v > 0),
    "augment.flip_h_prob": (float, "0.5", lambda v: 0 <= v <= 1),
    "augment.flip_v_prob": (float, "0.2", lambda v: 0 <= v <= 1),
    "augment.brightness_delta": (float, "0.2", lambda v: 0 <= v < 1),
    "augment.contrast_delta": (float, "0.2", lambda v: 0 <= v < 1),
    "augment.saturation_delta": (float, "0.2", lambda v: 0 <= v < 1),
    "augment.hue_delta": (float, "0.05", lambda v: 0 <= v <= 0.5),
    "augment.grayscale_prob": (float, "0.1", lambda v: 0 <= v <= 1),
    "augment.blur_prob": (float, "0.3", lambda v: 0 <= v <= 1),
    "augment.blur_sigma_lo": (float, "0.1", lambda v: v > 0),
    "augment.blur_sigma_hi": (float, "1.5", lambda v: v > 0),
    "augment.translate_frac": (float, "0.1", lambda v: 0 <= v < 1),
    "model.shallow_input": (_parse_size, "32x32", None),
    "model.detailed_input": (_parse_size, "64x64", None),
    "model.classes": (int, "0", lambda v: v == 0 or v >= 2),
    "model.shallow_stages": (parse_stages, "8p,16p,32p", None),
    "model.detailed_stages": (parse_stages, "8p,16p,32p,64p,64n", None),
    "model.classifier_hidden": (_parse_ints, "", None),
    "model.scale_mode": (str, "fixed", lambda v: v in ("fixed", "factor")),
    "model.shallow_factor": (float, "0.5", lambda v: v > 0),
    "model.detailed_factor": (float, "1.0", lambda v: v > 0),
    "loss.kind": (str, "ce", lambda v: v in LOSS_KINDS),
    "loss.ls_epsilon": (float, "0.1", lambda v: 0 <= v < 1),
    "loss.focal_gamma": (float, "2.0", lambda v: v >= 0),
    "loss.focal_alpha": (_parse_floats, "", None),
    "loss.ldam_max_margin": (float, "0.5", lambda v: v > 0),
    "loss.ldam_scale": (float, "30.0", lambda v: v > 0),
    "loss.mix_alpha": (float, "1.0", lambda v: v >= 0),
    "loss.mix_beta": (float, "1.0", lambda v: v >= 0),
    "optim.epochs": (int, "30", lambda v: v >= 1),
    "optim.batch_size": (int, "32", lambda v: v >= 1),
    "optim.learning_rate": (float, "0.001", lambda v: v > 0),
    "optim.beta1": (float, "0.9", lambda v: 0 <= v < 1),
    "optim.beta2": (float, "0.999", lambda v: 0 <= v < 1),
    "optim.epsilon": (float, "1e-8", lambda v: v > 0),
    "optim.seed": (int, "0", None),
    "eval.formats": (str, "json,csv,markdown", None),
    "eval.manifest": (str, "", None),
    "eval.focus_class": (str, "", None),
}


class RunConfig:
    """Validated flat key-value configuration with section grouping."""

    def __init__(self, values: dict[str, str] | None = None):
        self._text: dict[str, str] = {key: default for key, (_, default, _) in DEFAULTS.items()}
        self._parsed: dict[str, object] = {}
        if values:
            for key, text in values.items():
                self.set(key, text)
        self._reparse()

    def set(self, key: str, text: str) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        self._text[key] = str(text)
        self._reparse()

    def _reparse(self) -> None:
        parsed = {}
        for key, raw in self._text.items():
            parser, _, validator = DEFAULTS[key]
            try:
                value = parser(raw)
            except (ValueError, EnsembleConfigError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
            if validator is not None and not validator(value):
                raise ConfigError(f"value out of range for {key}: {raw!r}")
            parsed[key] = value
        self._parsed = parsed

    def __getitem__(self, key: str):
        try:
            return self._parsed[key]
        except KeyError:
            raise ConfigError(f"unknown configuration key {key!r}") from None

    @classmethod
    def from_file(cls, path: str | Path, overrides: dict[str, str] | None = None) -> "RunConfig":
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keep key case
        path = Path(path)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file {path}: {exc}") from exc
        values = {}
        for section in parser.sections():
            for key, value in parser.items(section):
                values[f"{section}.{key}"] = value
        config = cls()
        for key, value in values.items():
            config.set(key, value)
        if overrides:
            for key, value in overrides.items():
                config.set(key, value)
        return config

    def echo(self) -> str:
        """Deterministic INI text of the effective configuration."""
        sections: dict[str, list[tuple[str, str]]] = {}
        for key in sorted(self._text):
            section, name = key.split(".", 1)
            sections.setdefault(section, []).append((name, self._text[key]))
        buf = io.StringIO()
        for section in sorted(sections):
            buf.write(f"[{section}]\n")
            for name, value in sections[section]:
                buf.write(f"{name} = {value}\n")
            buf.write("\n")
        return buf.getvalue()

    # -- structured views -------------------------------------------------

    def augmentation(self, target_size: tuple[int, int]) -> AugmentationConfig | None:
        if not self["augment.enabled"]:
            return None
        th, tw = target_size
        b = self["augment.brightness_delta"]
        c = self["augment.contrast_delta"]
        s = self["augment.saturation_delta"]
        h = self["augment.hue_delta"]
        frac = self["augment.translate_frac"]
        return AugmentationConfig(
            gamma_range=(self["augment.gamma_lo"], self["augment.gamma_hi"]),
            crop_scale_range=(self["augment.scale_lo"], self["augment.scale_hi"]),
            crop_aspect_range=(self["augment.aspect_lo"], self["augment.aspect_hi"]),
            flip_h_prob=self["augment.flip_h_prob"],
            flip_v_prob=self["augment.flip_v_prob"],
            brightness_range=(1.0 - b, 1.0 + b),
            contrast_range=(1.0 - c, 1.0 + c),
            saturation_range=(1.0 - s, 1.0 + s),
            hue_range=(-h, h),
            grayscale_prob=self["augment.grayscale_prob"],
            blur_sigma_range=(self["augment.blur_sigma_lo"], self["augment.blur_sigma_hi"]),
            blur_prob=self["augment.blur_prob"],
            translate_max=(int(frac * tw), int(frac * th)),
            target_size=target_size,
        )

    def loss_config(self) -> LossConfig:
        alpha = self["loss.focal_alpha"]
        return LossConfig(
            kind=self["loss.kind"],
            ls_epsilon=self["loss.ls_epsilon"],
            focal_gamma=self["loss.focal_gamma"],
            focal_alpha=alpha if alpha else None,
            ldam_max_margin=self["loss.ldam_max_margin"],
            ldam_scale=self["loss.ldam_scale"],
            mix_alpha=self["loss.mix_alpha"],
            mix_beta=self["loss.mix_beta"],
        )

    def ensemble_config(
        self,
        class_count: int,
        class_names: tuple[str, ...] | None = None,
        source_size: tuple[int, int] | None = None,
    ) -> EnsembleConfig:
        if self["model.scale_mode"] == "factor":
            if source_size is None:
                raise ConfigError(
                    "model.scale_mode=factor needs a source image size"
                )
            sh = max(1, round(self["model.shallow_factor"] * source_size[0]))
            sw = max(1, round(self["model.shallow_factor"] * source_size[1]))
            dh = max(1, round(self["model.detailed_factor"] * source_size[0]))
            dw = max(1, round(self["model.detailed_factor"] * source_size[1]))
            shallow_input, detailed_input = (sh, sw), (dh, dw)
        else:
            shallow_input = self["model.shallow_input"]
            detailed_input = self["model.detailed_input"]
        return EnsembleConfig(
            class_count=class_count,
            shallow_input=shallow_input,
            detailed_input=detailed_input,
            shallow_backbone=self["model.shallow_stages"],
            detailed_backbone=self["model.detailed_stages"],
            classifier_hidden=self["model.classifier_hidden"],
            class_names=class_names,
        )
