from fractions import Fraction

import numpy as np
import pytest

from tripivot import EncoderConfig, PatchConfig, init_encoder, substream
from tripivot.config import load_config
from tripivot.world import WorldConfig, generate_world


def tiny_world_config(**overrides):
    base = dict(
        num_classes=4, image_size=16, audio_seconds=0.32, sample_rate=4000,
        mel_bins=16, captions_per_audio=5, image_noise=0.05,
        audio_noise=0.04, vt_train=24, va_train=24, at_gold=24,
        eval_core=16, eval_shifted=8, eval_multi=8, max_labels=2,
    )
    base.update(overrides)
    return WorldConfig(**base)


@pytest.fixture(scope="session")
def tiny_world():
    return generate_world(tiny_world_config(), seed=11)


@pytest.fixture(scope="session")
def default_config():
    return load_config()


def small_image_encoder(seed=0, dtype="float32"):
    cfg = EncoderConfig(modality="image", width=16, layers=1, heads=2,
                        out_dim=8, mlp_ratio=2, input_shape=(16, 16),
                        patch=PatchConfig((8, 8), (8, 8), 3), dtype=dtype)
    return init_encoder(cfg, substream(seed, "init", 0))


def small_audio_encoder(seed=0, input_shape=(14, 16), dtype="float32"):
    cfg = EncoderConfig(modality="audio", width=16, layers=1, heads=2,
                        out_dim=8, mlp_ratio=2, input_shape=input_shape,
                        patch=PatchConfig((8, 8), (4, 8), 1), dtype=dtype)
    return init_encoder(cfg, substream(seed, "init", 2))


def small_text_encoder(vocab_size, seed=0, max_len=12, dtype="float32"):
    cfg = EncoderConfig(modality="text", width=16, layers=1, heads=2,
                        out_dim=8, mlp_ratio=2, vocab_size=vocab_size,
                        max_len=max_len, dtype=dtype)
    return init_encoder(cfg, substream(seed, "init", 1))


def finite_difference(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar f at float64 array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


# ---- brute-force metric oracles ---------------------------------------------
# Deliberately slow and loop-based so they share no code with the
# library implementations; ties break toward the lower candidate index.


def rank_by_similarity(query: np.ndarray, candidates: np.ndarray) -> list:
    sims = [float(np.dot(query, c)) for c in candidates]
    return sorted(range(len(candidates)), key=lambda i: (-sims[i], i))


def oracle_recall_at_k(query_ids, queries, cand_ids, candidates, gold,
                       k: int) -> float:
    hits = 0
    for qi, qid in enumerate(query_ids):
        order = rank_by_similarity(queries[qi], candidates)
        if {cand_ids[c] for c in order[:k]} & set(gold[qid]):
            hits += 1
    return hits / len(query_ids)


def oracle_map(scores, label_sets, num_classes: int):
    """Returns (macro mAP, {class: AP}, excluded classes)."""
    per_class = {}
    excluded = []
    for c in range(num_classes):
        rel = [c in labels for labels in label_sets]
        if not any(rel):
            excluded.append(c)
            continue
        order = sorted(range(len(label_sets)),
                       key=lambda i: (-float(scores[i][c]), i))
        hits = 0
        precisions = []
        for rank, i in enumerate(order, start=1):
            if rel[i]:
                hits += 1
                precisions.append(Fraction(hits, rank))
        per_class[c] = sum(precisions) / len(precisions)
    value = float(sum(per_class.values()) / len(per_class))
    return value, {c: float(ap) for c, ap in per_class.items()}, excluded


def oracle_pivotability(audio_vec, image_vecs, caption_vecs, caption_keys,
                        gold_keys, k: int, captions_per_image: int) -> float:
    union = set()
    for img in rank_by_similarity(audio_vec, image_vecs)[:k]:
        caps = rank_by_similarity(image_vecs[img], caption_vecs)
        union.update(caption_keys[c] for c in caps[:captions_per_image])
    return len(union & set(gold_keys)) / len(gold_keys)
