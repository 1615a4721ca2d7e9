"""Stage runner: optimizers, schedules, checkpoints, deterministic resume.

Four stages share one loop: image-text pretraining (VT), audio-to-pivot
alignment with the image tower frozen (VA), audio-text fine-tuning with
the text tower frozen (AT), and a supervised classifier probe (CLF).
Every random draw comes from a named substream of the stage seed keyed
by epoch, so a run resumed from an epoch checkpoint is bit-identical to
an uninterrupted one.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, bce_with_logits
from .encoders import EncoderConfig, ModalEncoder
from .errors import ContractViolation
from .fbank import CorpusStats, compute_fbank, mask_augment, normalize
from .fbank import corpus_stats as fbank_corpus_stats
from .formats import dump_json, read_params, write_params
from .objectives import (Temperature, info_nce, loss_at, loss_tri,
                         loss_va_frozen, softmax_cross_entropy, TAU_INIT)
from .seeding import substream
from .world import ClipFrameSet, Vocab

EVAL_FRAME = 1      # deterministic frame used outside training

STAGES = ("VT", "VA", "AT", "CLF")

# freeze pattern each stage requires; None = tower may be absent,
# a bool = the tower must be present with exactly that flag (towers that
# are present but unused must be frozen so nothing drifts silently).
_REQUIRED_FREEZE = {
    "VT": {"image": False, "text": False, "audio": None},
    "VA": {"image": True, "audio": False, "text": None},
    "AT": {"audio": False, "text": True, "image": None},
}


def sample_frame(frame_set: ClipFrameSet, mode: str,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Pick one of the four frames: uniform when training, always the
    second frame (index 1) at evaluation time; eval never consumes rng."""
    if mode == "train":
        if rng is None:
            raise ContractViolation("training frame choice needs an rng")
        return frame_set.frames[int(rng.integers(4))]
    if mode == "eval":
        return frame_set.frames[EVAL_FRAME]
    raise ContractViolation(f"unknown frame mode {mode!r}")


@dataclass
class StageConfig:
    stage: str
    epochs: int = 8
    batch_size: int = 64
    optimizer: str = "sgd"            # "sgd" | "adam"
    lr_weights: float = 0.2
    lr_biases: float = 0.0048
    momentum: float = 0.9
    weight_decay: float = 1e-6
    warmup_epochs: int = 0
    milestones: tuple = ()
    gamma: float = 0.5
    seed: int = 0
    freeze: dict = field(default_factory=dict)
    temperature_learnable: bool = True
    temperature_init: float = TAU_INIT
    time_mask: float = 0.2
    freq_mask: float = 0.25
    loss: str = "default"             # AT also accepts "vat"
    tunable: str = "all"              # AT: "all" | "proj" | "last_block"
    tune_last_k: int = 0              # CLF: trailing blocks to unfreeze
    head_mode: str = "multiclass"     # CLF: "multiclass" | "multilabel"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ContractViolation(f"unknown stage {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 2:
            raise ContractViolation("epochs must be >= 0, batch_size >= 2")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractViolation(f"unknown optimizer {self.optimizer!r}")
        if self.tunable not in ("all", "proj", "last_block"):
            raise ContractViolation(f"unknown tunable scope {self.tunable!r}")


@dataclass
class StageData:
    """Pre-assembled stage inputs; build via the prepare_* helpers."""

    records: list | None = None       # VT/VA records (or CLF records)
    specs: dict | None = None         # record_id -> normalized spectrogram
    vocab: Vocab | None = None
    max_len: int | None = None
    pairs: list | None = None         # AT alignment pairs
    audio_lookup: dict | None = None  # AT: record_id -> record
    vt_records: list | None = None    # VA: second corpus, alternating steps
    labels: np.ndarray | None = None  # CLF targets
    stats: CorpusStats | None = None  # carried into checkpoints


def compute_corpus_stats(records: list, world_cfg) -> CorpusStats:
    """Scalar fbank statistics over a declared training corpus."""
    specs = [compute_fbank(r.clip, world_cfg.mel_bins, world_cfg.frame_shift_ms,
                           world_cfg.window_ms) for r in records]
    return fbank_corpus_stats(specs)


def spec_bank(records: list, world_cfg, stats: CorpusStats) -> dict:
    """Normalized spectrograms keyed by record id."""
    out = {}
    for rec in records:
        spec = compute_fbank(rec.clip, world_cfg.mel_bins,
                             world_cfg.frame_shift_ms, world_cfg.window_ms)
        out[rec.record_id] = normalize(spec, stats)
    return out


# ---- optimizers ------------------------------------------------------------


def _is_weight(name: str) -> bool:
    leaf = name.split(".")[-1]
    return leaf.startswith("w") or leaf in ("proj", "emb")


class _Optimizer:
    def __init__(self, params: list, cfg: StageConfig):
        self.cfg = cfg
        self.params = [(n, t) for n, t in params if t.requires_grad]
        self.slots: dict[str, np.ndarray] = {}
        self.steps = 0

    def zero_grad(self):
        for _, t in self.params:
            t.zero_grad()

    def _slot(self, key: str, like: np.ndarray) -> np.ndarray:
        if key not in self.slots:
            self.slots[key] = np.zeros_like(like)
        return self.slots[key]

    def step(self, factor: float):
        raise NotImplementedError


class MomentumSgd(_Optimizer):
    def step(self, factor: float):
        self.steps += 1
        for name, t in self.params:
            if t.grad is None:
                continue
            g = t.grad
            lr = self.cfg.lr_weights if _is_weight(name) else self.cfg.lr_biases
            if _is_weight(name) and self.cfg.weight_decay:
                g = g + self.cfg.weight_decay * t.data
            buf = self._slot(name + ".v", t.data)
            buf *= self.cfg.momentum
            buf += g
            t.data -= (lr * factor) * buf


class Adam(_Optimizer):
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    def step(self, factor: float):
        self.steps += 1
        for name, t in self.params:
            if t.grad is None:
                continue
            g = t.grad
            lr = self.cfg.lr_weights if _is_weight(name) else self.cfg.lr_biases
            if _is_weight(name) and self.cfg.weight_decay:
                g = g + self.cfg.weight_decay * t.data
            m = self._slot(name + ".m", t.data)
            v = self._slot(name + ".s", t.data)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** self.steps)
            vhat = v / (1 - self.beta2 ** self.steps)
            t.data -= (lr * factor) * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(params: list, cfg: StageConfig) -> _Optimizer:
    return (Adam if cfg.optimizer == "adam" else MomentumSgd)(params, cfg)


def lr_factor(cfg: StageConfig, epoch: int) -> float:
    """Linear warmup by epoch, then multiplicative milestone decay."""
    if cfg.warmup_epochs and epoch < cfg.warmup_epochs:
        return (epoch + 1) / cfg.warmup_epochs
    return float(cfg.gamma ** sum(1 for m in cfg.milestones if m <= epoch))


# ---- checkpoints -----------------------------------------------------------


def save_checkpoint(prefix, encoders: dict, temperature: Temperature | None,
                    stats: CorpusStats | None = None, epoch: int = -1,
                    stage: str = "", seed: int = 0,
                    opt_slots: dict | None = None,
                    opt_steps: int = 0) -> None:
    entries = []
    enc_meta = {}
    for tower in sorted(encoders):
        enc = encoders[tower]
        enc_meta[tower] = {"config": enc.cfg.to_dict(), "frozen": enc.frozen}
        for name, t in enc.param_items():
            entries.append((f"{tower}.{name}", t.data))
    if temperature is not None and temperature.learnable:
        entries.append(("temperature.log_inv_tau", temperature.log_inv_tau.data))
    for key in sorted(opt_slots or {}):
        entries.append((f"opt.{key}", opt_slots[key]))
    manifest = {
        "kind": "checkpoint",
        "stage": stage,
        "epoch": epoch,
        "seed": seed,
        "opt_steps": opt_steps,
        "encoders": enc_meta,
        "temperature": None if temperature is None else {
            "learnable": temperature.learnable, "tau": temperature.tau,
            "min_tau": temperature.min_tau},
        "corpus_stats": None if stats is None else {
            "mean": stats.mean, "std": stats.std},
    }
    write_params(prefix, entries, manifest)


def load_checkpoint(prefix):
    """Returns (encoders, temperature, stats, manifest, opt_slots)."""
    manifest, tensors = read_params(prefix)
    if manifest.get("kind") != "checkpoint":
        raise ContractViolation(f"{prefix} is not a checkpoint")
    encoders = {}
    for tower, meta in manifest["encoders"].items():
        cfg = EncoderConfig.from_dict(meta["config"])
        prefix_key = tower + "."
        params = {}
        for name, arr in tensors.items():
            if name.startswith(prefix_key) and not name.startswith("opt."):
                pname = name[len(prefix_key):]
                params[pname] = Tensor(arr.astype(cfg.dtype), name=pname)
        encoders[tower] = ModalEncoder(cfg, params, frozen=meta["frozen"])
    temperature = None
    if manifest["temperature"] is not None:
        tmeta = manifest["temperature"]
        temperature = Temperature(init=tmeta["tau"],
                                  learnable=tmeta["learnable"],
                                  min_tau=tmeta["min_tau"])
        if "temperature.log_inv_tau" in tensors:
            temperature.log_inv_tau.data = np.asarray(
                tensors["temperature.log_inv_tau"], dtype=np.float32)
    stats = None
    if manifest["corpus_stats"] is not None:
        stats = CorpusStats(**manifest["corpus_stats"])
    opt_slots = {name[len("opt."):]: arr for name, arr in tensors.items()
                 if name.startswith("opt.")}
    return encoders, temperature, stats, manifest, opt_slots


# ---- stage loop ------------------------------------------------------------


def _check_freeze(cfg: StageConfig, encoders: dict):
    if cfg.stage == "CLF":
        return
    required = dict(_REQUIRED_FREEZE[cfg.stage])
    declared = dict(required)
    declared.update(cfg.freeze)
    for tower, want in declared.items():
        need = required.get(tower)
        if need is not None and want != need:
            raise ContractViolation(
                f"stage {cfg.stage} requires {tower} frozen={need}, "
                f"config declares frozen={want}")
    for tower, enc in encoders.items():
        want = declared.get(tower, required.get(tower))
        if want is None:
            want = True          # present-but-unused towers must not drift
        if enc.frozen != want:
            raise ContractViolation(
                f"inconsistent freeze flags for {tower!r}: stage {cfg.stage} "
                f"expects frozen={want}, encoder says frozen={enc.frozen}")


def _tunable_names(encoder, tunable: str) -> set:
    if tunable == "proj":
        return {"proj", "ln_f.g", "ln_f.b"}
    if tunable == "last_block":
        last = encoder.cfg.layers - 1
        names = {"proj", "ln_f.g", "ln_f.b"}
        names |= {n for n in encoder.params if n.startswith(f"blocks.{last}.")}
        return names
    raise ContractViolation(f"unknown tunable scope {tunable!r}")


def _trainable_params(encoders: dict, temperature: Temperature | None,
                      tunable: str = "all") -> list:
    params = []
    for tower in sorted(encoders):
        keep = None
        if tunable != "all" and tower == "audio":
            keep = _tunable_names(encoders[tower], tunable)
        for name, t in encoders[tower].param_items():
            if keep is None or name in keep:
                params.append((f"{tower}.{name}", t))
    if temperature is not None:
        params.extend(temperature.param_items())
    return [(n, t) for n, t in params if t.requires_grad]


def _batches(n: int, batch_size: int, order: np.ndarray):
    """Contiguous batches of a permutation; the last partial batch is
    dropped unless the corpus is smaller than one batch."""
    b = min(batch_size, n)
    for start in range(0, n - b + 1, b):
        yield order[start:start + b]


def _vt_batch(data: StageData, idx, frame_rng, caption_rng):
    records = [data.records[i] for i in idx]
    images = np.stack([sample_frame(r.frames, "train", frame_rng)
                       for r in records])
    captions = [r.captions[int(caption_rng.integers(len(r.captions)))]
                for r in records]
    tokens = data.vocab.batch(captions, data.max_len)
    return images, tokens


def _masked_specs(data: StageData, ids, cfg: StageConfig, mask_rng):
    return np.stack([mask_augment(data.specs[rid], cfg.time_mask,
                                  cfg.freq_mask, mask_rng) for rid in ids])


def run_stage(cfg: StageConfig, data: StageData, encoders: dict,
              temperature: Temperature | None = None,
              out_dir=None, log_path=None, resume_from=None,
              probe=None):
    """Train one stage; returns (encoders, temperature, log).

    Checkpoints land in `out_dir` (one per epoch plus `ckpt-final`);
    the log is one dict per step with keys step, loss, tau, also written
    as JSON lines to `log_path` when given.
    """
    _check_freeze(cfg, encoders)
    if temperature is None and cfg.stage != "CLF":
        temperature = Temperature(cfg.temperature_init,
                                  cfg.temperature_learnable)
    start_epoch = 0
    opt_slots, opt_steps = {}, 0
    if resume_from is not None:
        res_encoders, res_temp, _, manifest, opt_slots = load_checkpoint(resume_from)
        if manifest["stage"] != cfg.stage:
            raise ContractViolation(
                f"resume checkpoint is for stage {manifest['stage']}, "
                f"not {cfg.stage}")
        for tower, enc in res_encoders.items():
            if tower in encoders:
                for name, t in enc.param_items():
                    encoders[tower].params[name].data = t.data.astype(
                        encoders[tower].params[name].dtype)
        if res_temp is not None:
            temperature = res_temp
        start_epoch = manifest["epoch"] + 1
        opt_steps = manifest.get("opt_steps", 0)
    if probe is not None:
        train_params = probe.param_items()
    else:
        train_params = _trainable_params(encoders, temperature, cfg.tunable)
    opt = make_optimizer(train_params, cfg)
    opt.slots = dict(opt_slots)
    opt.steps = opt_steps
    if not opt.params and cfg.epochs > start_epoch:
        raise ContractViolation(f"stage {cfg.stage} has nothing to train")

    n = len(data.pairs if cfg.stage == "AT" else data.records)
    if n == 0:
        raise ContractViolation(f"stage {cfg.stage} received an empty corpus")
    alternating = bool(cfg.stage == "VA" and data.vt_records)
    steps_per_epoch = (n // min(cfg.batch_size, n)) * (2 if alternating else 1)
    step = start_epoch * steps_per_epoch
    epoch = start_epoch - 1
    log = []
    log_file = open(log_path, "a") if log_path else None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            order_rng = substream(cfg.seed, "order", epoch)
            frame_rng = substream(cfg.seed, "frame", epoch)
            caption_rng = substream(cfg.seed, "caption", epoch)
            mask_rng = substream(cfg.seed, "mask", epoch)
            order = order_rng.permutation(n)
            factor = lr_factor(cfg, epoch)
            alt = None
            if alternating:
                alt_order = order_rng.permutation(len(data.vt_records))
                alt = list(_batches(len(data.vt_records), cfg.batch_size,
                                    alt_order))
                vt_view = StageData(records=data.vt_records, vocab=data.vocab,
                                    max_len=data.max_len)
            for b, idx in enumerate(_batches(n, cfg.batch_size, order)):
                losses = [_stage_loss(cfg, data, encoders, temperature, idx,
                                      frame_rng, caption_rng, mask_rng, probe)]
                if alt:
                    # both pivot losses active: strict VA, VT alternation,
                    # one optimizer step per batch
                    images, tokens = _vt_batch(vt_view, alt[b % len(alt)],
                                               frame_rng, caption_rng)
                    losses.append(info_nce(encoders["image"].encode_batch(images),
                                           encoders["text"].encode_batch(tokens),
                                           temperature))
                for loss in losses:
                    opt.zero_grad()
                    loss.backward()
                    opt.step(factor)
                    if temperature is not None:
                        temperature.clamp()
                    _log_step(log, log_file, step, loss, temperature)
                    step += 1
            if out_dir is not None and probe is None:
                _save_epoch(out_dir, cfg, encoders, temperature, data, epoch, opt)
        if out_dir is not None and probe is None:
            # classifier probes are in-memory objects; only contrastive
            # stages produce checkpoints
            save_checkpoint(Path(out_dir) / "ckpt-final", encoders, temperature,
                            data.stats, epoch=epoch, stage=cfg.stage,
                            seed=cfg.seed, opt_slots=opt.slots,
                            opt_steps=opt.steps)
    finally:
        if log_file:
            log_file.close()
    return encoders, temperature, log


def _log_step(log, log_file, step, loss, temperature):
    entry = {"step": step, "loss": float(loss.data),
             "tau": temperature.tau if temperature is not None else None}
    log.append(entry)
    if log_file:
        log_file.write(json.dumps(entry, sort_keys=True) + "\n")


def _save_epoch(out_dir, cfg, encoders, temperature, data, epoch, opt):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / f"ckpt-e{epoch:03d}", encoders, temperature,
                    data.stats, epoch=epoch, stage=cfg.stage, seed=cfg.seed,
                    opt_slots=opt.slots, opt_steps=opt.steps)


def _stage_loss(cfg: StageConfig, data: StageData, encoders: dict,
                temperature, idx, frame_rng, caption_rng, mask_rng, probe):
    if cfg.stage == "VT":
        images, tokens = _vt_batch(data, idx, frame_rng, caption_rng)
        return info_nce(encoders["image"].encode_batch(images),
                        encoders["text"].encode_batch(tokens), temperature)
    if cfg.stage == "VA":
        records = [data.records[i] for i in idx]
        images = np.stack([sample_frame(r.frames, "train", frame_rng)
                           for r in records])
        specs = _masked_specs(data, [r.record_id for r in records], cfg,
                              mask_rng)
        return loss_va_frozen(encoders["image"], encoders["audio"],
                              images, specs, temperature)
    if cfg.stage == "AT":
        pairs = [data.pairs[i] for i in idx]
        specs = _masked_specs(data, [p.audio_id for p in pairs], cfg, mask_rng)
        tokens = data.vocab.batch([p.caption for p in pairs], data.max_len)
        if cfg.loss == "vat":
            records = [data.audio_lookup[p.audio_id] for p in pairs]
            images = np.stack([sample_frame(r.frames, "train", frame_rng)
                               for r in records])
            encoders["text"].require_frozen("tri-modal fine-tuning")
            v = encoders["image"].encode_batch(images)
            a = encoders["audio"].encode_batch(specs)
            t = encoders["text"].encode_batch(tokens)
            return loss_tri(v, a, t, temperature)
        return loss_at(encoders["audio"], encoders["text"], specs, tokens,
                       temperature)
    # CLF
    records = [data.records[i] for i in idx]
    specs = _masked_specs(data, [r.record_id for r in records], cfg, mask_rng)
    targets = data.labels[np.asarray(idx)]
    logits = probe.logits(specs)
    if cfg.head_mode == "multilabel":
        return bce_with_logits(logits, targets)
    return softmax_cross_entropy(logits, targets)


# ---- classifier probe ------------------------------------------------------


class ClassifierProbe:
    """Linear head on audio embeddings, optionally tuning trailing blocks.

    tune_last_k = 0 is a pure linear probe; k >= 1 also unfreezes the
    last k transformer blocks, the final norm and the projection.
    """

    def __init__(self, encoder: ModalEncoder, num_classes: int,
                 mode: str = "multiclass", rng: np.random.Generator = None,
                 tune_last_k: int = 0):
        if num_classes < 2:
            raise ContractViolation("classifier head needs at least 2 classes")
        if mode not in ("multiclass", "multilabel"):
            raise ContractViolation(f"unknown head mode {mode!r}")
        if rng is None:
            raise ContractViolation("classifier init needs an rng")
        self.encoder = encoder
        self.mode = mode
        self.num_classes = num_classes
        dt = np.dtype(encoder.cfg.dtype)
        self.w = Tensor(rng.normal(0, 0.02, (encoder.cfg.out_dim, num_classes))
                        .astype(dt), requires_grad=True, name="head.w")
        self.b = Tensor(np.zeros(num_classes, dtype=dt), requires_grad=True,
                        name="head.b")
        self.set_tunable(tune_last_k)

    def set_tunable(self, k: int):
        layers = self.encoder.cfg.layers
        if not (0 <= k <= layers):
            raise ContractViolation(
                f"tune_last_k must be in [0, {layers}], got {k}")
        self.tune_last_k = k
        keep = set()
        if k > 0:
            for i in range(layers - k, layers):
                keep.add(f"blocks.{i}.")
            keep.update(("ln_f.", "proj"))
        for name, t in self.encoder.params.items():
            t.requires_grad = any(name.startswith(p) for p in keep)
        self.encoder.frozen = not keep

    def param_items(self):
        items = [("head.w", self.w), ("head.b", self.b)]
        items.extend((f"enc.{n}", t) for n, t in self.encoder.param_items()
                     if t.requires_grad)
        return items

    def logits(self, specs: np.ndarray) -> Tensor:
        return self.encoder.encode_batch(specs) @ self.w + self.b

    def predict(self, specs: np.ndarray) -> np.ndarray:
        scores = self.logits(specs).data
        if self.mode == "multiclass":
            return np.argmax(scores, axis=1)
        return (scores > 0).astype(np.int32)


def attach_classifier_head(encoder: ModalEncoder, num_classes: int,
                           mode: str = "multiclass",
                           rng: np.random.Generator = None,
                           tune_last_k: int = 0) -> ClassifierProbe:
    return ClassifierProbe(encoder, num_classes, mode, rng, tune_last_k)
