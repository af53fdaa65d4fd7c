"""Flat dotted-key run configuration.

Every training-recipe constant lives here as a default (loss coefficients,
label smoothing, warmup ratio, MixUp settings, speed factors, batch size,
epoch cap, per-group learning rates and decays). Config files are
`key = value` lines with `#` comments; CLI --set overrides win over the
file. Unknown keys are rejected, and the effective config echoes into the
run directory so a run can be reproduced from its own artifacts.
"""

from __future__ import annotations

import hashlib
import os

from .augment import AugmentConfig
from .errors import ConfigError
from .losses import LossConfig
from .model import EcapaConfig, EncoderStubConfig, LoraConfig, ModelConfig, PoolingConfig
from .optim import OptimizerConfig
from .training import TrainConfig

DEFAULTS = {
    "model.feature_dim": 16,
    "model.encoder_layers": 2,
    "model.encoder_dim": 32,
    "model.encoder_heads": 4,
    "model.encoder_ff": 64,
    "model.lora_rank": 4,
    "model.lora_alpha": 8.0,
    "model.pool_scales": "1,4,16",
    "model.pool_attention_hidden": 32,
    "model.ecapa_channels": 64,
    "model.ecapa_dilations": "2,3,4",
    "model.ecapa_res2_scale": 4,
    "model.ecapa_gn_groups": 8,
    "model.ecapa_se_bottleneck": 16,
    "model.ecapa_kernel": 3,
    "model.ecapa_stats_attention_hidden": 32,
    "loss.lambda_cat": 1.0,
    "loss.lambda_dim": 0.5,
    "loss.epsilon_smooth": 0.1,
    "loss.eps_ccc": 1e-8,
    "optim.backbone_lr": 5e-5,
    "optim.backbone_weight_decay": 4e-5,
    "optim.downstream_lr": 6e-4,
    "optim.downstream_weight_decay": 8e-5,
    "optim.beta1": 0.9,
    "optim.beta2": 0.999,
    "optim.eps": 1e-8,
    "schedule.warmup_ratio": 0.08,
    "schedule.min_lr_factor": 0.0,
    "train.epochs": 15,
    "train.batch_size": 32,
    "train.patience": 3,
    "train.max_frames": 0,
    "augment.enabled": True,
    "augment.mixup_prob": 0.5,
    "augment.mixup_alpha": 0.3,
    "augment.noise_snr_db_min": 5.0,
    "augment.noise_snr_db_max": 20.0,
    "augment.speed_factors": "0.9,1.1",
    "augment.enable_mixup": True,
    "augment.enable_noise": True,
    "augment.enable_speed": True,
    "augment.noise_dir": "",
    "eval.top_k": 4,
    "eval.merge_cap_s": 15.0,
    "pseudo.window_s": 4.0,
    "pseudo.hop_s": 2.0,
    "pseudo.min_emotional_fraction": 0.25,
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(default, bool):
        lowered = raw.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key}: expected boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"key {key}: expected integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"key {key}: expected float, got {raw!r}") from None
    return raw


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Defaults + file + overrides, validated against the known key set."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self.values[key] = value

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    @staticmethod
    def load(config_path: str | None = None, overrides: list | None = None) -> "RunConfig":
        cfg = RunConfig()
        if config_path:
            if not os.path.exists(config_path):
                raise ConfigError(f"config file not found: {config_path}")
            with open(config_path, encoding="utf-8") as handle:
                for line_no, line in enumerate(handle, start=1):
                    stripped = line.split("#", 1)[0].strip()
                    if not stripped:
                        continue
                    if "=" not in stripped:
                        raise ConfigError(f"{config_path}:{line_no}: expected key = value")
                    key, raw = (part.strip() for part in stripped.split("=", 1))
                    if key not in DEFAULTS:
                        raise ConfigError(f"{config_path}:{line_no}: unknown config key {key!r}")
                    cfg.values[key] = _coerce(key, raw)
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"override {item!r} must be key=value")
            key, raw = (part.strip() for part in item.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            cfg.values[key] = _coerce(key, raw)
        return cfg

    def echo(self) -> str:
        lines = [f"{key} = {_format(self.values[key])}" for key in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> bytes:
        return hashlib.sha256(self.echo().encode("utf-8")).digest()

    def write_echo(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(self.echo())

    # -- dataclass builders --

    def _int_tuple(self, key: str) -> tuple:
        raw = str(self.values[key])
        try:
            return tuple(int(part) for part in raw.split(",") if part.strip())
        except ValueError:
            raise ConfigError(f"key {key}: expected comma-separated integers, got {raw!r}") from None

    def _float_tuple(self, key: str) -> tuple:
        raw = str(self.values[key])
        try:
            return tuple(float(part) for part in raw.split(",") if part.strip())
        except ValueError:
            raise ConfigError(f"key {key}: expected comma-separated floats, got {raw!r}") from None

    def model_config(self, seed: int) -> ModelConfig:
        return ModelConfig(
            feature_dim=self["model.feature_dim"],
            seed=seed,
            encoder=EncoderStubConfig(
                num_layers=self["model.encoder_layers"],
                model_dim=self["model.encoder_dim"],
                num_heads=self["model.encoder_heads"],
                ff_dim=self["model.encoder_ff"],
            ),
            lora=LoraConfig(rank=self["model.lora_rank"], alpha=self["model.lora_alpha"]),
            pooling=PoolingConfig(
                scales=self._int_tuple("model.pool_scales"),
                attention_hidden=self["model.pool_attention_hidden"],
            ),
            ecapa=EcapaConfig(
                channels=self["model.ecapa_channels"],
                dilations=self._int_tuple("model.ecapa_dilations"),
                res2_scale=self["model.ecapa_res2_scale"],
                gn_groups=self["model.ecapa_gn_groups"],
                se_bottleneck=self["model.ecapa_se_bottleneck"],
                kernel_size=self["model.ecapa_kernel"],
                stats_attention_hidden=self["model.ecapa_stats_attention_hidden"],
            ),
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            lambda_cat=self["loss.lambda_cat"],
            lambda_dim=self["loss.lambda_dim"],
            epsilon_smooth=self["loss.epsilon_smooth"],
            eps_ccc=self["loss.eps_ccc"],
        )

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            backbone_lr=self["optim.backbone_lr"],
            backbone_weight_decay=self["optim.backbone_weight_decay"],
            downstream_lr=self["optim.downstream_lr"],
            downstream_weight_decay=self["optim.downstream_weight_decay"],
            beta1=self["optim.beta1"],
            beta2=self["optim.beta2"],
            eps=self["optim.eps"],
        )

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            patience=self["train.patience"],
            seed=seed,
            max_frames=self["train.max_frames"],
            warmup_ratio=self["schedule.warmup_ratio"],
            min_lr_factor=self["schedule.min_lr_factor"],
        )

    def augment_config(self) -> AugmentConfig | None:
        if not self["augment.enabled"]:
            return None
        return AugmentConfig(
            mixup_prob=self["augment.mixup_prob"],
            mixup_alpha=self["augment.mixup_alpha"],
            noise_snr_db=(self["augment.noise_snr_db_min"], self["augment.noise_snr_db_max"]),
            speed_factors=self._float_tuple("augment.speed_factors"),
            enable_mixup=self["augment.enable_mixup"],
            enable_noise=self["augment.enable_noise"],
            enable_speed=self["augment.enable_speed"],
            noise_dir=self["augment.noise_dir"] or None,
        )
