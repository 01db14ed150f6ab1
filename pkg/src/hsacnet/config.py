"""Run configuration: one YAML file drives every subcommand; each run freezes its resolved copy."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .augment import AugmentSpec
from .encoder import EncoderConfig
from .network import NetworkConfig
from .trainer import TrainConfig

RESOLVED_NAME = "resolved_config.yaml"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EncoderSection(_Section):
    variant: Literal["paper", "tiny", "conv-baseline"] = "tiny"
    conv_widths: Literal["paper", "tiny"] = "tiny"  # only used by conv-baseline
    adapters: bool = True
    # pretrained: import + freeze + adapters; frozen: import + freeze, no adapters; random: no import, full fine-tune
    init: Literal["pretrained", "random", "frozen"] = "random"
    pretrained_path: Optional[str] = None
    adapter_reduction: int = 8
    seed: int = 0


class SadamSection(_Section):
    enabled: bool = True
    softmax_axis: Literal["m", "n"] = "m"
    gamma_init: float = 0.0


class DecoderSection(_Section):
    # "auto": 64 for the paper encoder, 16 for tiny; "none": keep encoder widths
    neck_channels: Union[int, Literal["auto", "none"]] = "auto"


class DataSection(_Section):
    root: str = "data/synthetic"
    train_split: str = "train"
    val_split: str = "val"
    test_split: str = "test"
    labeled_ratio: float = Field(0.05, gt=0.0, le=1.0)
    partition_seed: int = 0


class RunConfig(_Section):
    encoder: EncoderSection = Field(default_factory=EncoderSection)
    sadam: SadamSection = Field(default_factory=SadamSection)
    decoder: DecoderSection = Field(default_factory=DecoderSection)
    train: TrainConfig = Field(default_factory=TrainConfig)
    augment: AugmentSpec = Field(default_factory=AugmentSpec)
    data: DataSection = Field(default_factory=DataSection)
    out_dir: str = "runs/default"
    threads: int = 1

    @model_validator(mode="after")
    def _check(self):
        if self.encoder.init != "random" and self.encoder.pretrained_path is not None:
            if not Path(self.encoder.pretrained_path).exists():
                raise ValueError(f"encoder.pretrained_path does not exist: {self.encoder.pretrained_path}")
        # building the encoder config surfaces width/reduction conflicts before any compute
        self.network_config()
        return self

    def encoder_config(self) -> EncoderConfig:
        e = self.encoder
        scale = e.conv_widths if e.variant == "conv-baseline" else e.variant
        base = EncoderConfig.paper if scale == "paper" else EncoderConfig.tiny
        return base(
            variant="conv" if e.variant == "conv-baseline" else "hiera",
            adapter_enabled=e.adapters and e.init != "frozen",
            adapter_reduction=e.adapter_reduction,
            freeze_backbone=e.init != "random",
            init_mode="random" if e.init == "random" else "pretrained-import",
            seed=e.seed,
        )

    def network_config(self) -> NetworkConfig:
        enc = self.encoder_config()
        neck = self.decoder.neck_channels
        if neck == "auto":
            neck = 64 if enc.channels[-1] >= 768 else 16
        elif neck == "none":
            neck = None
        return NetworkConfig(
            encoder=enc,
            neck_channels=neck,
            sadam_enabled=self.sadam.enabled,
            sca_softmax_axis=self.sadam.softmax_axis,
            gamma_init=self.sadam.gamma_init,
            seed=self.encoder.seed,
        )

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def load_config(path: Optional[str | Path] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Read a YAML run config (or defaults) and apply dotted-key overrides like {'train.tau': 0.9}."""
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: top level must be a mapping")
    for key, value in (overrides or {}).items():
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return RunConfig.model_validate(data)


def freeze_config(config: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / RESOLVED_NAME
    path.write_text(config.to_yaml())
    return path
