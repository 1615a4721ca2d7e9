"""Retrieval metrics, zero-shot probes, pivotability, scaling fits.

All metrics work on unit-norm embedding matrices and break score ties by
the lower candidate index (stable sort), so results are reproducible to
the byte.  Gold conventions: for audio-to-text retrieval the gold set of
a clip is its own captions; for text-to-audio it is the source clip.
"""

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .fbank import compute_fbank, normalize
from .formats import dump_json
from .training import sample_frame

DEFAULT_PROMPT = "the sound of"
PIVOTABLE_THRESHOLD = 0.6
CAPTIONS_PER_IMAGE = 5


def _ranked(queries: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Candidate indices sorted by descending similarity, stable ties."""
    sims = queries @ candidates.T
    return np.argsort(-sims, axis=1, kind="stable")


# ---- batch encoding helpers ------------------------------------------------


def encode_images(encoder, records) -> np.ndarray:
    """Embed the deterministic evaluation frame of each record."""
    frames = np.stack([sample_frame(r.frames, "eval") for r in records])
    return encoder.encode_batch(frames).data


def encode_audio(encoder, records, world_cfg, stats) -> np.ndarray:
    """Embed unmasked, corpus-normalized spectrograms."""
    specs = np.stack([
        normalize(compute_fbank(r.clip, world_cfg.mel_bins,
                                world_cfg.frame_shift_ms, world_cfg.window_ms),
                  stats)
        for r in records])
    return encoder.encode_batch(specs).data


def encode_captions(encoder, vocab, captions: list, max_len: int,
                    prompt: str | None = None) -> np.ndarray:
    return encoder.encode_batch(vocab.batch(captions, max_len, prompt)).data


def encode_label_prompts(encoder, vocab, class_words: list, max_len: int,
                         prompt: str | None = DEFAULT_PROMPT) -> np.ndarray:
    """Embed one prompted label text per class, in class order."""
    captions = [vocab.encode([w]) for w in class_words]
    return encode_captions(encoder, vocab, captions, max_len, prompt)


# ---- retrieval -------------------------------------------------------------


@dataclass
class RetrievalResult:
    query_ids: list
    cand_ids: list
    ranking: np.ndarray          # (Nq, Nc) candidate indices, best first
    gold: dict                   # query_id -> set of candidate ids
    k: int
    r_at_1: float | None = None
    r_at_10: float | None = None

    def recall(self, k: int) -> float:
        """Fraction of queries with at least one gold item in the top k."""
        if not (1 <= k <= len(self.cand_ids)):
            raise ContractViolation(
                f"k={k} outside candidate count {len(self.cand_ids)}")
        hits = 0
        for qi, qid in enumerate(self.query_ids):
            top = {self.cand_ids[c] for c in self.ranking[qi, :k]}
            if top & self.gold[qid]:
                hits += 1
        return hits / len(self.query_ids)


def recall_at_k(query_ids, queries: np.ndarray, cand_ids, candidates: np.ndarray,
                gold: dict, k: int) -> RetrievalResult:
    """Rank candidates for every query and compute R@k (and R@1, R@10)."""
    queries = np.asarray(queries)
    candidates = np.asarray(candidates)
    if len(query_ids) != queries.shape[0] or len(cand_ids) != candidates.shape[0]:
        raise ContractViolation("ids and embedding rows must align")
    if not (1 <= k <= candidates.shape[0]):
        raise ContractViolation(
            f"k={k} outside candidate count {candidates.shape[0]}")
    missing = [q for q in query_ids if q not in gold or not gold[q]]
    if missing:
        raise ContractViolation(f"queries without gold items: {missing[:3]}")
    result = RetrievalResult(list(query_ids), list(cand_ids),
                             _ranked(queries, candidates), dict(gold), k)
    result.r_at_1 = result.recall(1)
    result.r_at_10 = result.recall(10) if len(cand_ids) >= 10 else None
    return result


def va_retrieval_check(query_vecs: np.ndarray, query_labels: list,
                       cand_vecs: np.ndarray, cand_labels: list,
                       k: int = 1) -> float:
    """Fraction of queries whose top-k contains a candidate with the
    exact same label set (cross-modal relevance by label equality)."""
    if not (1 <= k <= len(cand_labels)):
        raise ContractViolation(f"k={k} outside candidate count")
    ranking = _ranked(np.asarray(query_vecs), np.asarray(cand_vecs))
    hits = 0
    for qi, qlab in enumerate(query_labels):
        want = frozenset(qlab)
        if any(frozenset(cand_labels[c]) == want for c in ranking[qi, :k]):
            hits += 1
    return hits / len(query_labels)


# ---- zero-shot classification ----------------------------------------------


def zero_shot_classify(audio_vecs: np.ndarray, label_vecs: np.ndarray) -> np.ndarray:
    """Predicted class index per clip: argmax cosine against the prompted
    label embeddings; ties resolve to the lowest class index."""
    audio_vecs = np.asarray(audio_vecs)
    label_vecs = np.asarray(label_vecs)
    if label_vecs.shape[0] < 2:
        raise ContractViolation("zero-shot needs at least 2 labels")
    return np.argmax(audio_vecs @ label_vecs.T, axis=1)


def zero_shot_accuracy(audio_vecs, label_vecs, true_labels) -> float:
    pred = zero_shot_classify(audio_vecs, label_vecs)
    return float(np.mean(pred == np.asarray(true_labels)))


# ---- multi-label mAP -------------------------------------------------------


@dataclass
class MapResult:
    value: float
    per_class: dict
    excluded: list               # classes with zero positives


def mean_average_precision(scores: np.ndarray, label_sets: list,
                           num_classes: int) -> MapResult:
    """Macro mAP over classes; a class with no positive items is excluded
    from the mean and reported."""
    scores = np.asarray(scores)
    if scores.shape != (len(label_sets), num_classes):
        raise ContractViolation(
            f"scores must be (items, classes), got {scores.shape}")
    relevant = np.zeros((len(label_sets), num_classes), dtype=bool)
    for i, labels in enumerate(label_sets):
        for c in labels:
            relevant[i, c] = True
    per_class, excluded, exact = {}, [], []
    for c in range(num_classes):
        n_pos = int(relevant[:, c].sum())
        if n_pos == 0:
            excluded.append(c)
            continue
        order = np.argsort(-scores[:, c], kind="stable")
        # precision values are small rationals; accumulating them exactly
        # makes AP independent of summation order
        total, hits = Fraction(0), 0
        for rank, is_rel in enumerate(relevant[order, c], start=1):
            if is_rel:
                hits += 1
                total += Fraction(hits, rank)
        exact.append(total / n_pos)
        per_class[c] = float(exact[-1])
    if not per_class:
        raise ContractViolation("every class has zero positives")
    return MapResult(float(sum(exact, Fraction(0)) / len(exact)),
                     per_class, excluded)


# ---- pivotability ----------------------------------------------------------


@dataclass
class PivotabilityScore:
    audio_id: str
    k: int
    value: float                 # |union of bridged captions ∩ gold| / gold

    @property
    def pivotable(self) -> bool:
        return self.value >= PIVOTABLE_THRESHOLD


def pivotability(audio_id: str, audio_vec: np.ndarray, image_vecs: np.ndarray,
                 caption_vecs: np.ndarray, caption_keys: list,
                 gold_keys: set, k: int,
                 captions_per_image: int = CAPTIONS_PER_IMAGE) -> PivotabilityScore:
    """Bridge one clip through images to captions.

    Retrieve the top-k images for the clip, take each image's top
    captions, union the caption identities (duplicates count once), and
    score the overlap with the clip's gold caption identities.
    """
    if k < 1 or k > image_vecs.shape[0]:
        raise ContractViolation(f"k={k} outside image count")
    if not gold_keys:
        raise ContractViolation("pivotability needs non-empty gold captions")
    audio_vec = np.asarray(audio_vec).reshape(1, -1)
    top_images = _ranked(audio_vec, image_vecs)[0, :k]
    per_image = _ranked(image_vecs[top_images], caption_vecs)[:, :captions_per_image]
    union = {caption_keys[c] for row in per_image for c in row}
    value = len(union & set(gold_keys)) / len(gold_keys)
    return PivotabilityScore(audio_id, k, value)


def pivotability_probe(audio_ids, audio_vecs, image_vecs, caption_vecs,
                       caption_keys, gold_keys_per_audio, k,
                       captions_per_image: int = CAPTIONS_PER_IMAGE) -> list:
    """Pivotability for a whole eval split; image bridges are shared."""
    if k < 1 or k > np.asarray(image_vecs).shape[0]:
        raise ContractViolation(f"k={k} outside image count")
    bridged = _ranked(np.asarray(image_vecs),
                      np.asarray(caption_vecs))[:, :captions_per_image]
    keysets = [frozenset(caption_keys[c] for c in row) for row in bridged]
    ranking = _ranked(np.asarray(audio_vecs), np.asarray(image_vecs))
    scores = []
    for i, audio_id in enumerate(audio_ids):
        union = set()
        for img in ranking[i, :k]:
            union |= keysets[img]
        gold = set(gold_keys_per_audio[i])
        if not gold:
            raise ContractViolation("pivotability needs non-empty gold captions")
        scores.append(PivotabilityScore(audio_id, k,
                                        len(union & gold) / len(gold)))
    return scores


# ---- scaling fits ----------------------------------------------------------


@dataclass
class ScalingFit:
    slope: float
    intercept: float
    r_squared: float
    counts: list
    metrics: list
    residuals: list
    target: float | None = None
    extrapolated_count: float | None = None
    extrapolated: bool = False


def fit_scaling(counts, metrics, target: float | None = None) -> ScalingFit:
    """Least-squares line of metric vs log2(pair count).

    With a target metric, solves for the pair count the line predicts:
    2 ** ((target - intercept) / slope); counts outside the fitted ladder
    are flagged as extrapolations.
    """
    counts = [int(c) for c in counts]
    metrics = [float(m) for m in metrics]
    if len(counts) != len(metrics) or len(counts) < 3:
        raise ContractViolation("scaling fit needs >= 3 aligned points")
    if any(c <= 0 for c in counts):
        raise ContractViolation("pair counts must be positive")
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise ContractViolation("pair counts must be strictly increasing")
    x = np.log2(np.asarray(counts, dtype=np.float64))
    y = np.asarray(metrics, dtype=np.float64)
    # centered closed form: exact on noiseless inputs, and a flat ladder
    # yields slope 0.0 exactly so the target guard below can fire
    xc = x - x.mean()
    yc = y - y.mean()
    slope = float((xc * yc).sum() / (xc * xc).sum())
    intercept = float(y.mean() - slope * x.mean())
    fitted = slope * x + intercept
    residuals = y - fitted
    ss_res = float((residuals ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        r_squared = 1.0 if ss_res == 0.0 else 0.0
    else:
        r_squared = 1.0 - ss_res / ss_tot
    fit = ScalingFit(float(slope), float(intercept), r_squared,
                     counts, metrics, residuals.tolist(), target)
    if target is not None:
        if slope == 0.0:
            raise ContractViolation("cannot solve for a target with zero slope")
        fit.extrapolated_count = float(2.0 ** ((target - intercept) / slope))
        fit.extrapolated = not (counts[0] <= fit.extrapolated_count <= counts[-1])
    return fit


# ---- reports ---------------------------------------------------------------


@dataclass
class EvalReport:
    """Metrics plus optional row-oriented tables, saved as JSON + CSV."""

    name: str
    config: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)

    def save(self, json_path) -> list:
        """Write the JSON document and one CSV per table; returns paths."""
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        dump_json({"name": self.name, "config": self.config,
                   "metrics": self.metrics,
                   "tables": {k: len(v) for k, v in self.tables.items()}},
                  json_path)
        written = [json_path]
        for table, rows in self.tables.items():
            path = json_path.with_suffix(f".{table}.csv")
            write_csv(path, rows)
            written.append(path)
        return written


def write_csv(path, rows: list) -> None:
    fields = sorted({k for row in rows for k in row})
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path) -> list:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
