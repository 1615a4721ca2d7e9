"""Contrastive objectives over unit-norm embeddings.

The core loss is symmetric InfoNCE: temperature-scaled cosine logits,
cross entropy against the co-indexed positive in both directions, mean
over the batch per direction, summed.  Uniform logits therefore give
exactly 2 ln N.  Composite losses reuse the pairwise term so the
tri-modal loss decomposes bitwise into the two-pair loss plus the
audio-text term.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, log_softmax, take_pairs, take_rows
from .errors import ContractViolation

# CLIP-style temperature: learnable log inverse temperature, initialised
# at ln(1/0.07), clamped so tau never drops below 0.01.
TAU_INIT = 0.07
TAU_MIN = 0.01


class Temperature:
    """Similarity temperature, fixed or learnable in log space."""

    def __init__(self, init: float = TAU_INIT, learnable: bool = True,
                 min_tau: float = TAU_MIN, dtype=np.float32):
        if init <= 0:
            raise ContractViolation("temperature must be positive")
        self.min_tau = float(min_tau)
        self.learnable = bool(learnable)
        self.log_inv_tau = Tensor(
            np.asarray(np.log(1.0 / init), dtype=dtype),
            requires_grad=self.learnable, name="temperature.log_inv_tau")

    @property
    def tau(self) -> float:
        return float(np.exp(-self.log_inv_tau.data))

    def scale(self):
        """Multiplier applied to cosine similarities (1/tau)."""
        if self.learnable:
            return self.log_inv_tau.exp()
        return float(np.exp(self.log_inv_tau.data))

    def clamp(self):
        """Post-step projection keeping tau >= min_tau."""
        limit = np.log(1.0 / self.min_tau)
        if float(self.log_inv_tau.data) > limit:
            self.log_inv_tau.data = np.asarray(
                limit, dtype=self.log_inv_tau.data.dtype)

    def param_items(self):
        return [("temperature.log_inv_tau", self.log_inv_tau)] if self.learnable else []


@dataclass
class SimilarityMatrix:
    """Scaled cosine similarities; values stay in the autodiff graph."""

    values: Tensor
    temperature: float


def _as_scale(temperature):
    if isinstance(temperature, Temperature):
        return temperature.scale(), temperature.tau
    tau = float(temperature)
    if tau <= 0:
        raise ContractViolation("temperature must be positive")
    return 1.0 / tau, tau


def _check_unit(t: Tensor, tag: str, tol: float = 1e-4):
    norms = np.linalg.norm(t.data, axis=-1)
    if not np.allclose(norms, 1.0, atol=tol):
        raise ContractViolation(f"{tag} embeddings must be unit-norm")


def similarity_matrix(a: Tensor, b: Tensor, temperature) -> SimilarityMatrix:
    """S[i, j] = <a_i, b_j> / tau for unit-norm rows, same batch size."""
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b))
    if a.ndim != 2 or b.ndim != 2 or a.shape != b.shape:
        raise ContractViolation(
            f"similarity expects equal (N, d) batches, got {a.shape} vs {b.shape}")
    _check_unit(a, "left")
    _check_unit(b, "right")
    scale, tau = _as_scale(temperature)
    return SimilarityMatrix((a @ b.transpose()) * scale, tau)


def info_nce(a: Tensor, b: Tensor, temperature) -> Tensor:
    """Symmetric InfoNCE with co-indexed positives on the diagonal."""
    n = a.shape[0] if isinstance(a, Tensor) else np.asarray(a).shape[0]
    if n < 2:
        raise ContractViolation("contrastive loss undefined for batch of 1")
    s = similarity_matrix(a, b, temperature).values
    idx = np.arange(n)
    row_term = take_pairs(log_softmax(s, axis=1), idx, idx).mean()
    col_term = take_pairs(log_softmax(s, axis=0), idx, idx).mean()
    return -(row_term + col_term)


def loss_bibi(v: Tensor, a: Tensor, t: Tensor, va_pairs=None, vt_pairs=None,
              temperature=TAU_INIT) -> Tensor:
    """Image-audio plus image-text InfoNCE over explicit pairings.

    A pairing is an (m, 2) index array into (v, a) or (v, t); None means
    the trivial co-indexed pairing.  Both terms are required.
    """
    def gather(x: Tensor, y: Tensor, pairs):
        if pairs is None:
            return x, y
        pairs = np.asarray(pairs)
        if pairs.size == 0:
            raise ContractViolation(
                "loss_bibi requires both pairings non-empty (both terms)")
        return take_rows(x, pairs[:, 0]), take_rows(y, pairs[:, 1])

    v1, a1 = gather(v, a, va_pairs)
    v2, t2 = gather(v, t, vt_pairs)
    return info_nce(v1, a1, temperature) + info_nce(v2, t2, temperature)


def loss_tri(v: Tensor, a: Tensor, t: Tensor, temperature=TAU_INIT) -> Tensor:
    """Tri-modal loss: both pivot terms plus the audio-text term.

    Computed as loss_bibi + info_nce(A, T) so the decomposition
    loss_tri - (loss_bibi + info_nce(A, T)) is bitwise zero.
    """
    return loss_bibi(v, a, t, temperature=temperature) + info_nce(a, t, temperature)


def loss_va_frozen(image_encoder, audio_encoder, images: np.ndarray,
                   specs: np.ndarray, temperature) -> Tensor:
    """Audio-to-pivot loss: image tower must be frozen, audio trains."""
    image_encoder.require_frozen("audio alignment to the pivot")
    v = image_encoder.encode_batch(images)
    a = audio_encoder.encode_batch(specs)
    return info_nce(v, a, temperature)


def loss_at(audio_encoder, text_encoder, specs: np.ndarray,
            tokens: np.ndarray, temperature) -> Tensor:
    """Audio-text fine-tuning loss: text tower must be frozen."""
    text_encoder.require_frozen("audio-text fine-tuning")
    a = audio_encoder.encode_batch(specs)
    t = text_encoder.encode_batch(tokens)
    return info_nce(a, t, temperature)


# ---- supervised heads ------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean multi-class cross entropy; labels are class indices."""
    labels = np.asarray(labels)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ContractViolation("labels must be (N,) class indices")
    return -take_pairs(log_softmax(logits, axis=1), np.arange(n), labels).mean()
