"""Run configuration: a flat ``section.key = value`` text format.

Values parse as JSON when possible (numbers, lists, booleans), otherwise as
bare strings.  Keys are named after the hyperparameters they set (see KEYS);
unknown keys are an error so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

from .model import ModelConfig


class ConfigError(ValueError):
    """Bad key, bad value, or missing input; maps to exit code 2."""


@dataclass
class RunConfig:
    # run
    seed: int = 520
    out_dir: str = "runs/run"
    precision: str = "fp32"  # fp32 | fp64
    # data
    dataset: str = ""  # dataset directory; empty means synthesize
    layout: str = "double_banana_20"
    channels: int = 20
    data_length: int = 256
    synth_segments: int = 5000
    synth_classes: int = 0
    synth_seed: int = 99  # dataset generation is decoupled from training seed
    # masking
    mask_strategy: str = "aamp"  # aamp | random
    mask_ratios: list[float] = field(default_factory=lambda: [0.20, 0.35, 0.50])
    # model
    model: ModelConfig = field(default_factory=ModelConfig)
    # losses
    p_norm: float = 2.0
    masked_loss_only: bool = False
    auxiliary_loss_weight: float = 0.8
    w_importance: float = 0.008
    # optimizer / schedule
    epochs: int = 4
    batch_size: int = 8
    maximum_learning_rate: float = 3e-4
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    warm_up_ratio: float = 0.15
    adamw_betas: tuple[float, float] = (0.9, 0.98)
    weight_decay: float = 5e-3
    clipping_gradient: float = 100.0
    max_steps: int = 0  # caps epochs*steps_per_epoch when positive
    # fine-tuning
    n_classes: int = 2
    class_layers: int = 1
    freeze_epochs: int = 0
    finetune_loss: str = "balbce"  # balbce | ce
    bce_k: float = 0.0  # exposed but inert
    reinit_on_plateau: bool = False  # manual flag only
    pooling: str = "lobes"  # lobes | hemispheres | coronal | sagittal | mean | none

    def steps_total(self, n_samples: int) -> int:
        per_epoch = max(1, n_samples // self.batch_size)
        total = self.epochs * per_epoch
        if self.max_steps > 0:
            total = min(total, self.max_steps)
        return total


def _ratio(value: float) -> float:
    """Masking ratios may be written as percentages (e.g. 35) or fractions."""
    v = float(value)
    return v / 100.0 if v > 1.0 else v


def _set_model(attr, cast=None):
    def setter(cfg: RunConfig, value):
        setattr(cfg.model, attr, cast(value) if cast else value)

    return setter


def _set(attr, cast=None):
    def setter(cfg: RunConfig, value):
        setattr(cfg, attr, cast(value) if cast else value)

    return setter


KEYS = {
    # run
    "run.seed": _set("seed", int),
    "run.out_dir": _set("out_dir", str),
    "run.precision": _set("precision", str),
    # data / EEG sample (Table rows: Channels, Data length, Dynamic masking ratio)
    "data.dataset": _set("dataset", str),
    "data.layout": _set("layout", str),
    "data.channels": _set("channels", int),
    "data.data_length": _set("data_length", int),
    "data.synth_segments": _set("synth_segments", int),
    "data.synth_classes": _set("synth_classes", int),
    "data.synth_seed": _set("synth_seed", int),
    "mask.dynamic_masking_ratio": _set("mask_ratios", lambda v: [_ratio(x) for x in v]),
    "mask.strategy": _set("mask_strategy", str),
    # model architecture (Input dimension, Feed-forward dimension, Heads, Merge layers)
    "model.input_dimension": _set_model("d_model", int),
    "model.feed_forward_dimension": _set_model("shared_ffn_width", int),
    "model.heads": _set_model("n_heads", int),
    "model.layers": _set_model("n_layers", int),
    "model.merge_layers": _set_model("merge_factors", lambda v: [int(x) for x in v]),
    "model.decoder_layers": _set_model("decoder_layers", int),
    "model.activation": _set_model("activation", str),
    "model.pe_mode": _set_model("pe_mode", str),
    "model.max_time": _set_model("max_time", int),
    # PMoE (Hidden dimension of expert, Shared expert hidden dimension, Encoder
    # expert, Top-k%, Noise std, W importance, Auxiliary loss weight)
    "pmoe.expert_hidden_dimension": _set_model("expert_ffn_width", int),
    "pmoe.shared_expert_hidden_dimension": _set_model("shared_ffn_width", int),
    "pmoe.encoder_expert": _set_model("expert_counts", lambda v: [int(x) for x in v]),
    "pmoe.top_k": _set_model("top_k_fraction", float),
    "pmoe.noise_std": _set_model("noise_std", float),
    "pmoe.w_importance": _set("w_importance", float),
    "pmoe.auxiliary_loss_weight": _set("auxiliary_loss_weight", float),
    # training (Epochs, Batch size, Dropout, Maximum learning rate, Div factor,
    # Final div factor, Warm up ratio, AdamW betas, Weight decay, Clipping gradient)
    "optim.epochs": _set("epochs", int),
    "optim.batch_size": _set("batch_size", int),
    "optim.dropout": _set_model("dropout", float),
    "optim.maximum_learning_rate": _set("maximum_learning_rate", float),
    "optim.div_factor": _set("div_factor", float),
    "optim.final_div_factor": _set("final_div_factor", float),
    "optim.warm_up_ratio": _set("warm_up_ratio", float),
    "optim.adamw_betas": _set("adamw_betas", lambda v: (float(v[0]), float(v[1]))),
    "optim.weight_decay": _set("weight_decay", float),
    "optim.clipping_gradient": _set("clipping_gradient", float),
    "optim.max_steps": _set("max_steps", int),
    # objectives
    "loss.p_norm": _set("p_norm", float),
    "loss.masked_only": _set("masked_loss_only", bool),
    # fine-tuning (Class layers, Freeze epochs, BCE K)
    "finetune.n_classes": _set("n_classes", int),
    "finetune.class_layers": _set("class_layers", int),
    "finetune.freeze_epochs": _set("freeze_epochs", int),
    "finetune.loss": _set("finetune_loss", str),
    "finetune.bce_k": _set("bce_k", float),
    "finetune.reinit_on_plateau": _set("reinit_on_plateau", bool),
    "finetune.pooling": _set("pooling", str),
}


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip()


def parse_config_text(text: str) -> dict:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        pairs[key] = parse_value(value)
    return pairs


def apply_pairs(cfg: RunConfig, pairs: dict) -> RunConfig:
    for key, value in pairs.items():
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            KEYS[key](cfg, value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc
    return cfg


def load_run_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        apply_pairs(cfg, parse_config_text(text))
    if overrides:
        apply_pairs(cfg, overrides)
    try:
        # re-validate the nested model config after piecewise mutation
        cfg.model = ModelConfig(**{f.name: getattr(cfg.model, f.name) for f in fields(ModelConfig)})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.precision not in ("fp32", "fp64"):
        raise ConfigError(f"precision must be fp32 or fp64, got {cfg.precision!r}")
    if cfg.mask_strategy not in ("aamp", "random"):
        raise ConfigError(f"mask.strategy must be aamp or random, got {cfg.mask_strategy!r}")
    if not all(0.0 < r < 1.0 for r in cfg.mask_ratios):
        raise ConfigError(f"masking ratios must lie in (0,1): {cfg.mask_ratios}")
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Resolved key=value snapshot (inverse of the KEYS table)."""
    getters = {
        "run.seed": cfg.seed,
        "run.out_dir": cfg.out_dir,
        "run.precision": cfg.precision,
        "data.dataset": cfg.dataset,
        "data.layout": cfg.layout,
        "data.channels": cfg.channels,
        "data.data_length": cfg.data_length,
        "data.synth_segments": cfg.synth_segments,
        "data.synth_classes": cfg.synth_classes,
        "data.synth_seed": cfg.synth_seed,
        "mask.dynamic_masking_ratio": cfg.mask_ratios,
        "mask.strategy": cfg.mask_strategy,
        "model.input_dimension": cfg.model.d_model,
        "model.feed_forward_dimension": cfg.model.shared_ffn_width,
        "model.heads": cfg.model.n_heads,
        "model.layers": cfg.model.n_layers,
        "model.merge_layers": cfg.model.merge_factors,
        "model.decoder_layers": cfg.model.decoder_layers,
        "model.activation": cfg.model.activation,
        "model.pe_mode": cfg.model.pe_mode,
        "model.max_time": cfg.model.max_time,
        "pmoe.expert_hidden_dimension": cfg.model.expert_ffn_width,
        "pmoe.shared_expert_hidden_dimension": cfg.model.shared_ffn_width,
        "pmoe.encoder_expert": cfg.model.expert_counts,
        "pmoe.top_k": cfg.model.top_k_fraction,
        "pmoe.noise_std": cfg.model.noise_std,
        "pmoe.w_importance": cfg.w_importance,
        "pmoe.auxiliary_loss_weight": cfg.auxiliary_loss_weight,
        "optim.epochs": cfg.epochs,
        "optim.batch_size": cfg.batch_size,
        "optim.dropout": cfg.model.dropout,
        "optim.maximum_learning_rate": cfg.maximum_learning_rate,
        "optim.div_factor": cfg.div_factor,
        "optim.final_div_factor": cfg.final_div_factor,
        "optim.warm_up_ratio": cfg.warm_up_ratio,
        "optim.adamw_betas": list(cfg.adamw_betas),
        "optim.weight_decay": cfg.weight_decay,
        "optim.clipping_gradient": cfg.clipping_gradient,
        "optim.max_steps": cfg.max_steps,
        "loss.p_norm": cfg.p_norm,
        "loss.masked_only": cfg.masked_loss_only,
        "finetune.n_classes": cfg.n_classes,
        "finetune.class_layers": cfg.class_layers,
        "finetune.freeze_epochs": cfg.freeze_epochs,
        "finetune.loss": cfg.finetune_loss,
        "finetune.bce_k": cfg.bce_k,
        "finetune.reinit_on_plateau": cfg.reinit_on_plateau,
        "finetune.pooling": cfg.pooling,
    }
    lines = [f"{key} = {json.dumps(value)}" for key, value in getters.items()]
    return "\n".join(lines) + "\n"
