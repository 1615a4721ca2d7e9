"""Flat key-value configuration with file and environment overrides.

Config files hold `key = value` lines (# comments allowed). Precedence:
built-in defaults < config file < environment variables named
TRIPIVOT_<KEY> with dots replaced by underscores, e.g.
TRIPIVOT_WORLD_NUM_CLASSES overrides world.num_classes.
"""

import os
from pathlib import Path

from .encoders import EncoderConfig, PatchConfig
from .errors import ContractViolation
from .fbank import num_frames
from .training import StageConfig
from .world import WorldConfig

ENV_PREFIX = "TRIPIVOT_"

# Desk-scale defaults: small enough that the whole pipeline runs in
# minutes on a CPU, large enough that the pivot alignment emerges.
DEFAULTS = {
    # synthetic world
    "world.num_classes": "16",
    "world.image_size": "32",
    "world.audio_seconds": "0.64",
    "world.sample_rate": "8000",
    "world.mel_bins": "32",
    "world.frame_shift_ms": "10.0",
    "world.window_ms": "25.0",
    "world.captions_per_audio": "5",
    "world.image_noise": "0.06",
    "world.audio_noise": "0.04",
    "world.vt_train": "768",
    "world.va_train": "768",
    "world.at_gold": "832",
    "world.eval_core": "192",
    "world.eval_shifted": "96",
    "world.eval_multi": "128",
    "world.max_labels": "3",
    "world.shifted_factor": "1.8",
    "world.shifted_noise": "0.06",
    # towers
    "encoder.width": "64",
    "encoder.layers": "2",
    "encoder.heads": "4",
    "encoder.out_dim": "32",
    "encoder.mlp_ratio": "4",
    "encoder.image_kernel": "8",
    "encoder.image_stride": "8",
    "encoder.audio_kernel_t": "8",
    "encoder.audio_kernel_f": "8",
    "encoder.audio_stride_t": "4",
    "encoder.audio_stride_f": "8",
    "encoder.max_len": "16",
    "encoder.audio_init": "image",       # "image" | "random"
    # shared training knobs; fixed temperature: a learnable scale is a
    # loss-descent direction out of the uniform plateau and accelerates
    # embedding collapse at this width
    "train.temperature_learnable": "false",
    "train.temperature_init": "0.2",
    "train.time_mask": "0.2",
    "train.freq_mask": "0.25",
    # stages
    "vt.epochs": "40",
    "vt.batch_size": "16",
    "vt.optimizer": "adam",
    "vt.lr_weights": "0.001",
    "vt.lr_biases": "0.001",
    "vt.momentum": "0.9",
    "vt.weight_decay": "1e-6",
    "vt.warmup_epochs": "2",
    "va.epochs": "8",
    "va.batch_size": "16",
    "va.optimizer": "adam",
    "va.lr_weights": "0.001",
    "va.lr_biases": "0.001",
    "va.momentum": "0.9",
    "va.weight_decay": "1e-6",
    "va.warmup_epochs": "2",
    "va.alternate_vt": "false",
    # tri-modal fine-tuning: the image-audio term anchors class structure
    # so curated-caption quality, not catastrophic drift, decides outcomes
    "at.epochs": "8",
    "at.batch_size": "16",
    "at.optimizer": "adam",
    "at.lr_weights": "0.0003",
    "at.lr_biases": "0.0003",
    "at.momentum": "0.9",
    "at.weight_decay": "1e-6",
    "at.warmup_epochs": "1",
    "at.loss": "vat",                    # "default" | "vat"
    "at.tunable": "all",                 # "all" | "proj" | "last_block"
    # curation
    "curate.mode": "mined",              # gold-caption|gold-label|mined|random
    "curate.pool": "indomain",           # indomain|template|shifted
    "curate.pool_size": "256",
    "curate.top_m": "1",
    "curate.count": "0",                 # 0 = keep all pairs
    # evaluation
    "eval.prompt": "the sound of",
    "eval.pair": "at",                   # at|vt|va
    "eval.split": "core",                # core|shifted
    "eval.pivot_k": "5",
}


def parse_config_file(path) -> dict:
    """Read `key = value` lines; unknown keys are rejected loudly."""
    out = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractViolation(
                f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ContractViolation(
                f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def load_config(path=None) -> dict:
    """Defaults overlaid by the file (if any) and then the environment."""
    cfg = dict(DEFAULTS)
    if path is not None:
        cfg.update(parse_config_file(path))
    for key in DEFAULTS:
        env_key = ENV_PREFIX + key.upper().replace(".", "_")
        if env_key in os.environ:
            cfg[key] = os.environ[env_key]
    return cfg


def get_int(cfg, key) -> int:
    return int(cfg[key])


def get_float(cfg, key) -> float:
    return float(cfg[key])


def get_str(cfg, key) -> str:
    return cfg[key]


def get_bool(cfg, key) -> bool:
    value = cfg[key].strip().lower()
    if value in ("true", "1", "yes"):
        return True
    if value in ("false", "0", "no"):
        return False
    raise ContractViolation(f"{key} must be a boolean, got {cfg[key]!r}")


# ---- materialized configs --------------------------------------------------


def world_config(cfg: dict) -> WorldConfig:
    return WorldConfig(
        num_classes=get_int(cfg, "world.num_classes"),
        image_size=get_int(cfg, "world.image_size"),
        audio_seconds=get_float(cfg, "world.audio_seconds"),
        sample_rate=get_int(cfg, "world.sample_rate"),
        mel_bins=get_int(cfg, "world.mel_bins"),
        frame_shift_ms=get_float(cfg, "world.frame_shift_ms"),
        window_ms=get_float(cfg, "world.window_ms"),
        captions_per_audio=get_int(cfg, "world.captions_per_audio"),
        image_noise=get_float(cfg, "world.image_noise"),
        audio_noise=get_float(cfg, "world.audio_noise"),
        vt_train=get_int(cfg, "world.vt_train"),
        va_train=get_int(cfg, "world.va_train"),
        at_gold=get_int(cfg, "world.at_gold"),
        eval_core=get_int(cfg, "world.eval_core"),
        eval_shifted=get_int(cfg, "world.eval_shifted"),
        eval_multi=get_int(cfg, "world.eval_multi"),
        max_labels=get_int(cfg, "world.max_labels"),
        shifted_factor=get_float(cfg, "world.shifted_factor"),
        shifted_noise=get_float(cfg, "world.shifted_noise"),
    )


def audio_input_shape(cfg: dict) -> tuple:
    """Spectrogram (frames, mel bins) for the configured clip length."""
    sr = get_int(cfg, "world.sample_rate")
    samples = int(round(get_float(cfg, "world.audio_seconds") * sr))
    window = int(round(sr * get_float(cfg, "world.window_ms") / 1000.0))
    shift = int(round(sr * get_float(cfg, "world.frame_shift_ms") / 1000.0))
    return (num_frames(samples, window, shift), get_int(cfg, "world.mel_bins"))


def image_encoder_config(cfg: dict) -> EncoderConfig:
    size = get_int(cfg, "world.image_size")
    k = get_int(cfg, "encoder.image_kernel")
    s = get_int(cfg, "encoder.image_stride")
    return EncoderConfig(
        modality="image", width=get_int(cfg, "encoder.width"),
        layers=get_int(cfg, "encoder.layers"), heads=get_int(cfg, "encoder.heads"),
        out_dim=get_int(cfg, "encoder.out_dim"),
        mlp_ratio=get_int(cfg, "encoder.mlp_ratio"),
        input_shape=(size, size), patch=PatchConfig((k, k), (s, s), 3))


def audio_patch_config(cfg: dict) -> PatchConfig:
    return PatchConfig(
        (get_int(cfg, "encoder.audio_kernel_t"), get_int(cfg, "encoder.audio_kernel_f")),
        (get_int(cfg, "encoder.audio_stride_t"), get_int(cfg, "encoder.audio_stride_f")),
        1)


def audio_encoder_config(cfg: dict) -> EncoderConfig:
    return EncoderConfig(
        modality="audio", width=get_int(cfg, "encoder.width"),
        layers=get_int(cfg, "encoder.layers"), heads=get_int(cfg, "encoder.heads"),
        out_dim=get_int(cfg, "encoder.out_dim"),
        mlp_ratio=get_int(cfg, "encoder.mlp_ratio"),
        input_shape=audio_input_shape(cfg), patch=audio_patch_config(cfg))


def text_encoder_config(cfg: dict, vocab_size: int) -> EncoderConfig:
    return EncoderConfig(
        modality="text", width=get_int(cfg, "encoder.width"),
        layers=get_int(cfg, "encoder.layers"), heads=get_int(cfg, "encoder.heads"),
        out_dim=get_int(cfg, "encoder.out_dim"),
        mlp_ratio=get_int(cfg, "encoder.mlp_ratio"),
        vocab_size=vocab_size, max_len=get_int(cfg, "encoder.max_len"))


def stage_config(cfg: dict, stage: str, seed: int) -> StageConfig:
    """StageConfig for VT/VA/AT from the config section of that stage."""
    section = stage.lower()
    return StageConfig(
        stage=stage,
        epochs=get_int(cfg, f"{section}.epochs"),
        batch_size=get_int(cfg, f"{section}.batch_size"),
        optimizer=get_str(cfg, f"{section}.optimizer"),
        lr_weights=get_float(cfg, f"{section}.lr_weights"),
        lr_biases=get_float(cfg, f"{section}.lr_biases"),
        momentum=get_float(cfg, f"{section}.momentum"),
        weight_decay=get_float(cfg, f"{section}.weight_decay"),
        warmup_epochs=get_int(cfg, f"{section}.warmup_epochs"),
        seed=seed,
        temperature_learnable=get_bool(cfg, "train.temperature_learnable"),
        temperature_init=get_float(cfg, "train.temperature_init"),
        time_mask=get_float(cfg, "train.time_mask"),
        freq_mask=get_float(cfg, "train.freq_mask"),
        loss=get_str(cfg, "at.loss") if stage == "AT" else "default",
        tunable=get_str(cfg, "at.tunable") if stage == "AT" else "all",
    )
