"""Flat `key = value` run configuration with # comments and dotted section
prefixes (model./train./data./eval.). Unknown keys are hard errors so typos
surface immediately; every command echoes its resolved values back out.
"""

from __future__ import annotations

from .model import CaraNetConfig
from .data import SyntheticSpec
from .train import TrainConfig

__all__ = ["ConfigError", "RunConfig", "KEYS"]


class ConfigError(ValueError):
    """Bad configuration file, key or value."""


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_scales(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


# key -> (parser, default)
KEYS: dict[str, tuple] = {
    "model.input_h": (int, 64),
    "model.input_w": (int, 64),
    "model.base_channels": (int, 4),
    "model.decoder_channels": (int, 8),
    "model.cfp_channels": (int, 4),
    "model.cfp_rate": (int, 8),
    "model.use_cfp": (_parse_bool, True),
    "model.use_ara": (_parse_bool, True),
    "model.seed": (int, 0),
    "train.learning_rate": (float, 1e-4),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.eps": (float, 1e-8),
    "train.epochs": (int, 30),
    "train.batch_size": (int, 20),
    "train.scales": (_parse_scales, (0.75, 1.0, 1.25)),
    "train.seed": (int, 0),
    "train.checkpoint_every": (int, 10),
    "data.manifest": (str, ""),
    "data.n_samples": (int, 375),
    "data.extent": (int, 64),
    "data.ratio_lo": (float, 0.005),
    "data.ratio_hi": (float, 0.05),
    "data.blobs_min": (int, 1),
    "data.blobs_max": (int, 3),
    "data.noise": (float, 0.05),
    "data.seed": (int, 0),
    "data.train_fraction": (float, 0.8),
    "eval.threshold": (float, 0.5),
    "eval.batch_size": (int, 8),
}


class RunConfig:
    """Validated key/value store over the registry above."""

    def __init__(self, values: dict[str, object] | None = None):
        self.values = {k: d for k, (_, d) in KEYS.items()}
        if values:
            for k, v in values.items():
                if k not in KEYS:
                    raise ConfigError(f"unknown config key {k!r}")
                self.values[k] = v

    def set_text(self, key: str, raw: str) -> None:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        parser = KEYS[key][0]
        try:
            self.values[key] = parser(raw.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def from_file(cls, path, overrides: list[str] | None = None) -> "RunConfig":
        cfg = cls()
        try:
            with open(path, "r", encoding="utf-8") as f:
                lines = f.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        for lineno, line in enumerate(lines, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = body.split("=", 1)
            cfg.set_text(key.strip(), raw)
        for ov in overrides or []:
            if "=" not in ov:
                raise ConfigError(f"override must be key=value, got {ov!r}")
            key, raw = ov.split("=", 1)
            cfg.set_text(key.strip(), raw)
        return cfg

    def serialize(self) -> str:
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    # -- adapters into the module configs ------------------------------------
    def model_config(self) -> CaraNetConfig:
        try:
            return CaraNetConfig(
                input_size=(self["model.input_h"], self["model.input_w"]),
                base_channels=self["model.base_channels"],
                decoder_channels=self["model.decoder_channels"],
                cfp_channels=self["model.cfp_channels"],
                cfp_rate=self["model.cfp_rate"],
                use_cfp=self["model.use_cfp"],
                use_ara=self["model.use_ara"],
                seed=self["model.seed"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                learning_rate=self["train.learning_rate"],
                adam_beta1=self["train.beta1"],
                adam_beta2=self["train.beta2"],
                adam_eps=self["train.eps"],
                epochs=self["train.epochs"],
                batch_size=self["train.batch_size"],
                scales=tuple(self["train.scales"]),
                seed=self["train.seed"],
                checkpoint_every=self["train.checkpoint_every"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def synthetic_spec(self) -> SyntheticSpec:
        try:
            return SyntheticSpec(
                n_samples=self["data.n_samples"],
                extent=(self["data.extent"], self["data.extent"]),
                ratio_range=(self["data.ratio_lo"], self["data.ratio_hi"]),
                blobs_per_image=(self["data.blobs_min"], self["data.blobs_max"]),
                noise=self["data.noise"],
                seed=self["data.seed"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
