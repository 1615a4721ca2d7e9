"""Synthetic tri-modal world: aligned images, audio clips and captions.

Every class owns a smooth visual template and a parametric audio
template (two sinusoid components with amplitude modulation, centered on
class-specific mel bins); records render the templates with controlled
noise, so at noise 0 all instances of a class are identical per modality
and a nearest-centroid classifier bounds what any model can learn.
Captions come from a small template grammar with distractor words shared
across classes.  The gold audio-text split is quarantined: only the
audio-text fine-tuning stage may read it.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import interpolate_positions
from .errors import ContractViolation, QuarantineError
from .fbank import WaveformClip, compute_fbank
from .formats import (dump_json, load_json, read_frames, read_raw_f32,
                      write_frames, write_raw_f32)
from .seeding import substream

# Nameable classes; the list length is the pattern capacity.
CLASS_WORDS = [
    "rain", "siren", "drum", "bell", "engine", "wind", "bird", "dog",
    "hammer", "wave", "train", "clock", "frog", "horn", "thunder", "cricket",
    "flute", "motor", "owl", "chime", "glass", "steam", "whistle", "pump",
    "cat", "crowd", "fire", "brook", "fan", "gull", "anvil", "kettle",
]
ADJECTIVES = ["loud", "soft", "faint", "steady", "sharp", "gentle", "harsh",
              "distant"]
VERBS = ["humming", "ringing", "rumbling", "echoing", "pulsing", "rattling",
         "droning", "hissing"]
PLACES = ["street", "room", "field", "distance", "night", "morning", "valley",
          "hall"]
FUNCTION_WORDS = ["a", "the", "in", "of", "and", "sound", "photo"]

PAD, BOS = "<pad>", "<s>"

# frame jitter offsets (rows, cols): fixed so noise 0 keeps instances of
# a class identical; index 1 is the deterministic evaluation frame.
FRAME_OFFSETS = ((0, 0), (1, 0), (0, 1), (1, 1))


class Vocab:
    """Whitespace word-level vocabulary with PAD=0 and BOS=1."""

    def __init__(self, words: list):
        self.words = list(words)
        if self.words[:2] != [PAD, BOS]:
            raise ContractViolation("vocabulary must start with PAD, BOS")
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    def encode(self, text) -> np.ndarray:
        words = text.split() if isinstance(text, str) else list(text)
        try:
            return np.array([self.index[w] for w in words], dtype=np.int32)
        except KeyError as e:
            raise ContractViolation(f"word {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        return " ".join(self.words[int(i)] for i in ids if int(i) > 1)

    def batch(self, captions: list, max_len: int,
              prompt: str | None = None) -> np.ndarray:
        """Stack token id sequences into (B, max_len): BOS + prompt + caption,
        PAD-filled; over-long sequences raise."""
        prompt_ids = self.encode(prompt) if prompt else np.empty(0, np.int32)
        out = np.zeros((len(captions), max_len), dtype=np.int32)
        for i, cap in enumerate(captions):
            cap = np.asarray(cap, dtype=np.int32)
            seq = np.concatenate(([self.bos_id], prompt_ids, cap))
            if seq.size > max_len:
                raise ContractViolation(
                    f"caption of {seq.size} tokens exceeds max_len {max_len}")
            out[i, :seq.size] = seq
        return out


def default_vocab() -> Vocab:
    return Vocab([PAD, BOS] + FUNCTION_WORDS + ADJECTIVES + VERBS + PLACES
                 + CLASS_WORDS)


@dataclass
class WorldConfig:
    num_classes: int = 16
    image_size: int = 32
    audio_seconds: float = 0.64
    sample_rate: int = 8000
    mel_bins: int = 32
    frame_shift_ms: float = 10.0
    window_ms: float = 25.0
    captions_per_audio: int = 5
    image_noise: float = 0.06
    audio_noise: float = 0.04
    vt_train: int = 768
    va_train: int = 768
    at_gold: int = 832
    eval_core: int = 192
    eval_shifted: int = 96
    eval_multi: int = 128
    max_labels: int = 3
    shifted_factor: float = 1.8
    shifted_noise: float = 0.06

    def __post_init__(self):
        if not (2 <= self.num_classes <= len(CLASS_WORDS)):
            raise ContractViolation(
                f"num_classes must be in [2, {len(CLASS_WORDS)}]: the class "
                "templates exceed pattern capacity beyond that")
        if self.captions_per_audio < 1:
            raise ContractViolation("captions_per_audio must be >= 1")
        if not (0 <= self.max_labels <= self.num_classes):
            raise ContractViolation("max_labels must be <= num_classes")

    @property
    def clip_samples(self) -> int:
        return int(round(self.audio_seconds * self.sample_rate))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class ClipFrameSet:
    """Exactly four frames rendered from one clip, (4, H, W, C)."""

    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[0] != 4:
            raise ContractViolation(
                f"a frame set holds exactly 4 frames, got {self.frames.shape}")


@dataclass
class TriModalRecord:
    record_id: str
    frames: ClipFrameSet
    clip: WaveformClip
    captions: list           # token id arrays, no BOS/PAD
    label_set: frozenset

    @property
    def caption(self) -> np.ndarray:
        return self.captions[0]


class GoldQuarantine:
    """Access guard around the gold audio-text records.

    Only the audio-text stage may open it; image-text and image-audio
    stage loaders get a QuarantineError.
    """

    def __init__(self, records: list):
        self._records = list(records)

    def __len__(self):
        return len(self._records)

    def open(self, stage: str) -> list:
        if stage != "AT":
            raise QuarantineError(
                f"gold audio-text records are quarantined from stage {stage!r}; "
                "only the AT stage may read them")
        return list(self._records)


@dataclass
class CorpusSplit:
    config: WorldConfig
    seed: int
    vocab: Vocab
    vt_train: list
    va_train: list
    at_gold: GoldQuarantine
    eval_core: list
    eval_shifted: list
    eval_multi: list
    oracle_accuracy: float

    def record_index(self, stage: str) -> dict:
        """id -> record over every split this stage may read."""
        records = {}
        for rec in (self.vt_train + self.va_train + self.eval_core
                    + self.eval_shifted + self.eval_multi):
            records[rec.record_id] = rec
        if stage == "AT":
            for rec in self.at_gold.open("AT"):
                records[rec.record_id] = rec
        return records


# ---- class templates -------------------------------------------------------


def visual_template(world_seed: int, class_id: int, size: int) -> np.ndarray:
    """Smooth (size, size, 3) pattern in [0.15, 0.85], fixed per class."""
    rng = substream(world_seed, "class-visual", class_id)
    base = rng.uniform(0.15, 0.85, (4, 4, 3))
    return interpolate_positions(base, (size, size)).astype(np.float32)


def audio_template(world_seed: int, class_id: int, num_classes: int,
                   sample_rate: int) -> dict:
    """Sinusoid parameters for one class, spread across the mel axis."""
    rng = substream(world_seed, "class-audio", class_id)
    lo, hi = 150.0, 0.42 * sample_rate
    # class centers equally spaced in log-frequency, slight jitter
    t = (class_id + 1.0) / (num_classes + 1.0)
    f0 = lo * (hi / lo) ** t
    f0 *= 1.0 + 0.02 * rng.uniform(-1, 1)
    f1 = f0 * 1.7
    if f1 > 0.47 * sample_rate:
        f1 = f0 * 0.59
    return {"f0": f0, "f1": f1,
            "am_rate": 1.5 + 6.0 * rng.uniform(),
            "amps": (0.45, 0.22), "am_depth": 0.4}


def render_audio(template: dict, num_samples: int, sample_rate: int) -> np.ndarray:
    t = np.arange(num_samples, dtype=np.float64) / sample_rate
    a0, a1 = template["amps"]
    am = 1.0 + template["am_depth"] * np.sin(2 * np.pi * template["am_rate"] * t)
    wave = (a0 * am * np.sin(2 * np.pi * template["f0"] * t)
            + a1 * np.sin(2 * np.pi * template["f1"] * t))
    return wave.astype(np.float32)


def render_frames(template: np.ndarray, noise: float,
                  rng: np.random.Generator) -> np.ndarray:
    frames = np.empty((4,) + template.shape, dtype=np.float32)
    for f, (dr, dc) in enumerate(FRAME_OFFSETS):
        img = np.roll(template, (dr, dc), axis=(0, 1))
        if noise > 0:
            img = img + noise * rng.standard_normal(template.shape)
        frames[f] = np.clip(img, 0.0, 1.0)
    return frames


# ---- caption grammar -------------------------------------------------------


def _caption_words(rng: np.random.Generator, class_ids: list,
                   style: str) -> list:
    names = [CLASS_WORDS[c] for c in class_ids]
    adj = ADJECTIVES[rng.integers(len(ADJECTIVES))]
    verb = VERBS[rng.integers(len(VERBS))]
    place = PLACES[rng.integers(len(PLACES))]
    if len(names) > 1:
        head = [names[0]]
        for n in names[1:]:
            head += ["and", "a", n]
        words = ["a"] + head + [verb]
        if style == "rich" and rng.integers(2):
            words += ["in", "the", place]
        return words
    name = names[0]
    if style == "plain":
        return [["a", name], [name, verb], ["the", name]][rng.integers(3)]
    if style == "vision":
        return [["a", "photo", "of", "a", name, "in", "the", place],
                ["a", "photo", "of", "a", adj, name]][rng.integers(2)]
    forms = [
        ["a", adj, name, verb, "in", "the", place],
        ["the", name, verb, "in", "the", place],
        ["the", "sound", "of", "a", name, verb],
        ["a", adj, name, verb],
        [name, verb, "in", "the", place],
    ]
    return forms[rng.integers(len(forms))]


def make_caption(vocab: Vocab, rng: np.random.Generator, class_ids,
                 style: str = "rich") -> np.ndarray:
    return vocab.encode(_caption_words(rng, sorted(class_ids), style))


def label_caption(vocab: Vocab, class_ids) -> np.ndarray:
    """Label words rendered as a minimal caption (label-mode supervision)."""
    return vocab.encode([CLASS_WORDS[c] for c in sorted(class_ids)])


# ---- record generation -----------------------------------------------------


class _TemplateBank:
    def __init__(self, cfg: WorldConfig, seed: int):
        self.visual = [visual_template(seed, c, cfg.image_size)
                       for c in range(cfg.num_classes)]
        self.audio = [audio_template(seed, c, cfg.num_classes, cfg.sample_rate)
                      for c in range(cfg.num_classes)]


def _make_record(cfg: WorldConfig, vocab: Vocab, bank: _TemplateBank,
                 rng: np.random.Generator, record_id: str, label_set,
                 num_samples: int, audio_noise: float) -> TriModalRecord:
    labels = sorted(label_set)
    scale = 1.0 / np.sqrt(len(labels))
    img_template = np.mean([bank.visual[c] for c in labels], axis=0)
    frames = render_frames(img_template, cfg.image_noise, rng)
    wave = scale * np.sum(
        [render_audio(bank.audio[c], num_samples, cfg.sample_rate)
         for c in labels], axis=0)
    if audio_noise > 0:
        wave = wave + audio_noise * rng.standard_normal(num_samples)
    captions = [make_caption(vocab, rng, labels)
                for _ in range(cfg.captions_per_audio)]
    return TriModalRecord(
        record_id, ClipFrameSet(frames),
        WaveformClip(wave.astype(np.float32), cfg.sample_rate),
        captions, frozenset(int(c) for c in labels))


def _single_label_split(cfg, vocab, bank, seed, name, count, ordinal,
                        num_samples=None, audio_noise=None) -> list:
    n_samples = num_samples or cfg.clip_samples
    noise = cfg.audio_noise if audio_noise is None else audio_noise
    records = []
    for i in range(count):
        rng = substream(seed, "record", ordinal, i)
        label = frozenset([i % cfg.num_classes])   # balanced by construction
        records.append(_make_record(cfg, vocab, bank, rng, f"{name}-{i:05d}",
                                    label, n_samples, noise))
    return records


def make_multilabel(cfg: WorldConfig, seed: int, count: int | None = None,
                    split_name: str = "multi", ordinal: int = 9) -> list:
    """Records whose label sets hold 1..max_labels classes (mixtures)."""
    if cfg.max_labels < 1:
        raise ContractViolation("max_labels must be >= 1 for mixtures")
    vocab = default_vocab()
    bank = _TemplateBank(cfg, seed)
    count = cfg.eval_multi if count is None else count
    records = []
    for i in range(count):
        rng = substream(seed, "record", ordinal, i)
        size = 1 + (i % cfg.max_labels)
        labels = frozenset(int(c) for c in
                           rng.choice(cfg.num_classes, size=size, replace=False))
        records.append(_make_record(cfg, vocab, bank, rng,
                                    f"{split_name}-{i:05d}", labels,
                                    cfg.clip_samples, cfg.audio_noise))
    return records


def centroid_oracle(cfg: WorldConfig, train: list, eval_records: list) -> float:
    """Nearest-centroid accuracy on raw log-mel spectrograms.

    Class centroids come from the training split; this bounds the noise
    level: classes must be separable before any encoder exists.
    """
    def feats(rec):
        return compute_fbank(rec.clip, cfg.mel_bins, cfg.frame_shift_ms,
                             cfg.window_ms).values.ravel()

    by_class: dict[int, list] = {}
    for rec in train:
        (label,) = rec.label_set
        by_class.setdefault(label, []).append(feats(rec))
    centroids = {c: np.mean(v, axis=0) for c, v in by_class.items()}
    classes = sorted(centroids)
    matrix = np.stack([centroids[c] for c in classes])
    hits = 0
    for rec in eval_records:
        d = np.linalg.norm(matrix - feats(rec)[None, :], axis=1)
        if classes[int(np.argmin(d))] in rec.label_set:
            hits += 1
    return hits / max(1, len(eval_records))


def generate_world(cfg: WorldConfig, seed: int) -> CorpusSplit:
    """Deterministically generate every split of a tri-modal world."""
    vocab = default_vocab()
    bank = _TemplateBank(cfg, seed)
    shifted_samples = int(round(cfg.clip_samples * cfg.shifted_factor))
    vt = _single_label_split(cfg, vocab, bank, seed, "vt", cfg.vt_train, 0)
    va = _single_label_split(cfg, vocab, bank, seed, "va", cfg.va_train, 1)
    gold = _single_label_split(cfg, vocab, bank, seed, "gold", cfg.at_gold, 2)
    ev = _single_label_split(cfg, vocab, bank, seed, "eval", cfg.eval_core, 3)
    shifted = _single_label_split(cfg, vocab, bank, seed, "shift",
                                  cfg.eval_shifted, 4,
                                  num_samples=shifted_samples,
                                  audio_noise=cfg.shifted_noise)
    multi = make_multilabel(cfg, seed) if cfg.eval_multi else []
    oracle = centroid_oracle(cfg, va, ev)
    return CorpusSplit(cfg, seed, vocab, vt, va, GoldQuarantine(gold),
                       ev, shifted, multi, oracle)


# ---- disk round-trip -------------------------------------------------------


def save_world(split: CorpusSplit, out_dir) -> None:
    out = Path(out_dir)
    (out / "blobs").mkdir(parents=True, exist_ok=True)
    records_meta = {}
    split_ids = {}
    named = [("vt_train", split.vt_train), ("va_train", split.va_train),
             ("at_gold", split.at_gold.open("AT")),
             ("eval_core", split.eval_core),
             ("eval_shifted", split.eval_shifted),
             ("eval_multi", split.eval_multi)]
    for name, records in named:
        split_ids[name] = [r.record_id for r in records]
        for rec in records:
            write_frames(out / "blobs" / f"{rec.record_id}.frames.bin",
                         rec.frames.frames)
            write_raw_f32(out / "blobs" / f"{rec.record_id}.wave.f32", rec.clip)
            records_meta[rec.record_id] = {
                "labels": sorted(rec.label_set),
                "captions": [c.tolist() for c in rec.captions],
            }
    dump_json({
        "config": split.config.to_dict(),
        "seed": split.seed,
        "vocab": split.vocab.words,
        "oracle_accuracy": split.oracle_accuracy,
        "splits": split_ids,
        "records": records_meta,
    }, out / "world.json")


def load_world(world_dir) -> CorpusSplit:
    root = Path(world_dir)
    if not (root / "world.json").exists():
        raise ContractViolation(f"no world manifest under {root}")
    meta = load_json(root / "world.json")
    cfg = WorldConfig(**meta["config"])
    vocab = Vocab(meta["vocab"])

    def load_records(ids):
        records = []
        for rid in ids:
            frames = read_frames(root / "blobs" / f"{rid}.frames.bin")
            clip = read_raw_f32(root / "blobs" / f"{rid}.wave.f32")
            info = meta["records"][rid]
            captions = [np.array(c, dtype=np.int32) for c in info["captions"]]
            records.append(TriModalRecord(rid, ClipFrameSet(frames), clip,
                                          captions, frozenset(info["labels"])))
        return records

    splits = meta["splits"]
    return CorpusSplit(
        cfg, meta["seed"], vocab,
        load_records(splits["vt_train"]), load_records(splits["va_train"]),
        GoldQuarantine(load_records(splits["at_gold"])),
        load_records(splits["eval_core"]), load_records(splits["eval_shifted"]),
        load_records(splits["eval_multi"]), meta["oracle_accuracy"])
