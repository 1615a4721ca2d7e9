"""Transformer encoders for images, audio spectrograms and text.

All three towers share one architecture: patch or token embedding,
learned positions plus a sequence-start vector, pre-norm transformer
blocks, final layer norm, sequence-start pooling and a linear projection
onto the shared unit sphere.  The audio tower is built from a trained
image tower by channel-averaging the patch kernel, re-striding it with
overlap, and bilinearly resampling the positional grid.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (Tensor, broadcast_to, concat, gelu, l2_normalize,
                       layer_norm, softmax, take_rows)
from .errors import ContractViolation, FrozenPivotError

# Reference hyperparameters at publication scale (ViT-B/32 towers,
# 10 s / 16 kHz clips -> 1000x128 fbank, 32x32 kernel, 16x24 stride
# -> 61x5 = 305 audio tokens).  Kept for documentation; the desk-scale
# defaults used by tests and demos live in config.py.
FULL_SCALE = {
    "width": 768, "layers": 12, "heads": 12, "out_dim": 512,
    "image_input": (224, 224), "image_kernel": (32, 32), "image_stride": (32, 32),
    "audio_input": (1000, 128), "audio_kernel": (32, 32), "audio_stride": (16, 24),
}


@dataclass(frozen=True)
class PatchConfig:
    """Patch embedding geometry: kernel window, stride, input channels."""

    kernel: tuple
    stride: tuple
    in_channels: int

    def __post_init__(self):
        kh, kw = self.kernel
        sh, sw = self.stride
        if min(kh, kw, sh, sw) < 1:
            raise ContractViolation("kernel and stride must be positive")
        if sh > kh or sw > kw:
            raise ContractViolation(
                f"stride {self.stride} exceeds kernel {self.kernel}: "
                "overlap is allowed, gaps are not")
        if self.in_channels < 1:
            raise ContractViolation("in_channels must be >= 1")


def patch_grid(input_shape: tuple, patch: PatchConfig) -> tuple:
    """Token grid (rows, cols) a patch kernel produces on `input_shape`.

    rows = floor((H - kh) / sh) + 1 and likewise for columns; the input
    must fit at least one kernel window per axis.
    """
    h, w = input_shape
    kh, kw = patch.kernel
    sh, sw = patch.stride
    if h < kh or w < kw:
        raise ContractViolation(
            f"input {input_shape} smaller than kernel {patch.kernel}")
    return ((h - kh) // sh + 1, (w - kw) // sw + 1)


def extract_patches(batch: np.ndarray, patch: PatchConfig) -> np.ndarray:
    """(B, H, W, C) -> (B, rows*cols, C*kh*kw), channel-major features."""
    b, h, w, c = batch.shape
    if c != patch.in_channels:
        raise ContractViolation(
            f"expected {patch.in_channels} channels, got {c}")
    rows, cols = patch_grid((h, w), patch)
    kh, kw = patch.kernel
    sh, sw = patch.stride
    x = np.ascontiguousarray(batch.transpose(0, 3, 1, 2))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]
    out = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, rows * cols, c * kh * kw)
    return np.ascontiguousarray(out)


def adapt_kernel_channels(weights: np.ndarray) -> np.ndarray:
    """Average a (out, 3, kh, kw) patch kernel over the channel axis.

    Running the original kernel on an input replicated to 3 channels
    equals 3x the adapted kernel on the mono input.
    """
    weights = np.asarray(weights)
    if weights.ndim != 4 or weights.shape[1] != 3:
        raise ContractViolation(
            f"adapt_kernel_channels expects (out, 3, kh, kw), got {weights.shape}")
    return weights.mean(axis=1, keepdims=True)


def interpolate_positions(grid: np.ndarray, target: tuple) -> np.ndarray:
    """Bilinearly resample a (gh, gw, width) positional grid to `target`.

    Axes are parameterised by index position, so target == source is an
    exact identity and the four corners are preserved for any target with
    at least 2 points per axis.  The sequence-start vector is not part of
    the grid and is never interpolated.
    """
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ContractViolation("positional grid must be (rows, cols, width)")
    th, tw = target
    if th < 1 or tw < 1:
        raise ContractViolation("target grid must be at least 1x1")

    def resample(arr: np.ndarray, axis: int, n_dst: int) -> np.ndarray:
        n_src = arr.shape[axis]
        if n_src == n_dst:
            return arr
        if n_src == 1:
            return np.repeat(arr, n_dst, axis=axis)
        pos = np.linspace(0.0, n_src - 1.0, n_dst)
        lo = np.minimum(pos.astype(int), n_src - 2)
        frac = (pos - lo).reshape([-1 if i == axis else 1 for i in range(arr.ndim)])
        a = np.take(arr, lo, axis=axis).astype(np.float64)
        b = np.take(arr, lo + 1, axis=axis).astype(np.float64)
        return a * (1.0 - frac) + b * frac

    out = resample(grid.astype(np.float64), 0, th)
    out = resample(out, 1, tw)
    return out.astype(grid.dtype)


@dataclass
class Embedding:
    """A point on the shared unit sphere plus its modality tag."""

    vector: np.ndarray
    modality: str
    item_id: str | None = None


@dataclass
class EncoderConfig:
    modality: str                      # "image" | "audio" | "text"
    width: int = 64
    layers: int = 2
    heads: int = 4
    out_dim: int = 32
    mlp_ratio: int = 4
    input_shape: tuple | None = None   # (H, W) for patch towers
    patch: PatchConfig | None = None
    vocab_size: int | None = None
    max_len: int | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.modality not in ("image", "audio", "text"):
            raise ContractViolation(f"unknown modality {self.modality!r}")
        if self.width % self.heads != 0:
            raise ContractViolation("width must be divisible by heads")
        if self.modality == "text":
            if not self.vocab_size or not self.max_len:
                raise ContractViolation("text tower needs vocab_size and max_len")
        else:
            if self.patch is None or self.input_shape is None:
                raise ContractViolation(
                    f"{self.modality} tower needs patch and input_shape")

    def to_dict(self) -> dict:
        d = {"modality": self.modality, "width": self.width,
             "layers": self.layers, "heads": self.heads,
             "out_dim": self.out_dim, "mlp_ratio": self.mlp_ratio,
             "dtype": self.dtype}
        if self.patch is not None:
            d["patch"] = {"kernel": list(self.patch.kernel),
                          "stride": list(self.patch.stride),
                          "in_channels": self.patch.in_channels}
            d["input_shape"] = list(self.input_shape)
        if self.modality == "text":
            d["vocab_size"] = self.vocab_size
            d["max_len"] = self.max_len
        return d

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        patch = None
        if "patch" in d:
            patch = PatchConfig(tuple(d["patch"]["kernel"]),
                                tuple(d["patch"]["stride"]),
                                d["patch"]["in_channels"])
        return EncoderConfig(
            modality=d["modality"], width=d["width"], layers=d["layers"],
            heads=d["heads"], out_dim=d["out_dim"],
            mlp_ratio=d.get("mlp_ratio", 4),
            input_shape=tuple(d["input_shape"]) if "input_shape" in d else None,
            patch=patch, vocab_size=d.get("vocab_size"),
            max_len=d.get("max_len"), dtype=d.get("dtype", "float32"))


class ModalEncoder:
    """One tower: embedding, positions, transformer, pooled projection."""

    def __init__(self, cfg: EncoderConfig, params: dict | None = None,
                 frozen: bool = False):
        self.cfg = cfg
        self.frozen = frozen
        if params is None:
            raise ContractViolation(
                "use init_encoder / from_params to construct an encoder")
        self.params: dict[str, Tensor] = params
        self.set_frozen(frozen)

    # ---- parameter management ---------------------------------------

    def param_items(self):
        return list(self.params.items())

    def set_frozen(self, flag: bool):
        self.frozen = bool(flag)
        for t in self.params.values():
            t.requires_grad = not self.frozen

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def clone(self) -> "ModalEncoder":
        params = {k: Tensor(v.data.copy(), name=k)
                  for k, v in self.params.items()}
        return ModalEncoder(self.cfg, params, frozen=self.frozen)

    # ---- forward ------------------------------------------------------

    def _dtype(self):
        return np.dtype(self.cfg.dtype)

    def _blocks(self, x: Tensor) -> Tensor:
        p = self.params
        cfg = self.cfg
        heads = cfg.heads
        head_dim = cfg.width // heads
        scale = head_dim ** -0.5
        for i in range(cfg.layers):
            pre = f"blocks.{i}."
            h = layer_norm(x) * p[pre + "ln1.g"] + p[pre + "ln1.b"]
            qkv = h @ p[pre + "attn.w_in"] + p[pre + "attn.b_in"]
            b, t, _ = qkv.shape
            qkv = qkv.reshape(b, t, 3, heads, head_dim).transpose(2, 0, 3, 1, 4)
            q, k, v = qkv[0], qkv[1], qkv[2]
            att = softmax((q @ k.transpose(0, 1, 3, 2)) * scale, axis=-1)
            ctx = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, cfg.width)
            x = x + (ctx @ p[pre + "attn.w_out"] + p[pre + "attn.b_out"])
            h = layer_norm(x) * p[pre + "ln2.g"] + p[pre + "ln2.b"]
            h = gelu(h @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"])
            x = x + (h @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"])
        return x

    def _finish(self, x: Tensor) -> Tensor:
        # Mean pooling over positions: start-token pooling leaves the
        # pooled vector dominated by input-independent weights at init,
        # and small-width contrastive training then collapses to the
        # constant embedding before alignment can form.
        p = self.params
        x = layer_norm(x) * p["ln_f.g"] + p["ln_f.b"]
        pooled = x.mean(axis=1)
        return l2_normalize(pooled @ p["proj"])

    def encode_batch(self, inputs: np.ndarray) -> Tensor:
        """Encode a batch to unit-norm vectors; deterministic, no RNG."""
        if self.cfg.modality == "text":
            return self._encode_tokens(np.asarray(inputs))
        return self._encode_grid(np.asarray(inputs, dtype=self._dtype()))

    def _encode_grid(self, batch: np.ndarray) -> Tensor:
        cfg = self.cfg
        if cfg.modality == "audio" and batch.ndim == 3:
            batch = batch[..., None]          # (B, T, F) -> 1 channel
        if batch.ndim != 4:
            raise ContractViolation(
                f"{cfg.modality} batch must be (B, H, W, C), got {batch.shape}")
        grid = patch_grid(batch.shape[1:3], cfg.patch)
        expected = patch_grid(cfg.input_shape, cfg.patch)
        if grid != expected:
            raise ContractViolation(
                f"token grid mismatch: encoder positions cover {expected}, "
                f"input produces {grid}; resample positions first")
        p = self.params
        b = batch.shape[0]
        feats = extract_patches(batch, cfg.patch)
        w2d = p["patch.w"].reshape(cfg.width, -1).transpose()
        tokens = Tensor(feats) @ w2d + p["patch.b"]
        pos = p["pos.grid"].reshape(1, grid[0] * grid[1], cfg.width)
        tokens = tokens + pos
        start = (p["cls"] + p["pos.start"]).reshape(1, 1, cfg.width)
        x = concat([broadcast_to(start, (b, 1, cfg.width)), tokens], axis=1)
        return self._finish(self._blocks(x))

    def _encode_tokens(self, ids: np.ndarray) -> Tensor:
        cfg = self.cfg
        if ids.ndim != 2:
            raise ContractViolation("token batch must be (B, L)")
        b, length = ids.shape
        if length > cfg.max_len:
            raise ContractViolation(
                f"sequence length {length} exceeds max_len {cfg.max_len}")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise ContractViolation("token id outside vocabulary")
        p = self.params
        x = take_rows(p["tok.emb"], ids.ravel()).reshape(b, length, cfg.width)
        x = x + p["pos.seq"][:length, :].reshape(1, length, cfg.width)
        return self._finish(self._blocks(x))

    def encode(self, item: np.ndarray, item_id: str | None = None) -> Embedding:
        vec = self.encode_batch(np.asarray(item)[None, ...]).data[0]
        return Embedding(np.array(vec, dtype=np.float32), self.cfg.modality, item_id)

    def require_frozen(self, role: str):
        if not self.frozen:
            raise FrozenPivotError(
                f"{role} requires the {self.cfg.modality} encoder frozen")


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> ModalEncoder:
    """Fresh tower; parameters drawn in a fixed order from `rng`."""
    dt = np.dtype(cfg.dtype)
    w = cfg.width

    def normal(shape, std=0.02):
        return Tensor(rng.normal(0.0, std, shape).astype(dt), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dt), requires_grad=True)

    params: dict[str, Tensor] = {}
    if cfg.modality == "text":
        params["tok.emb"] = normal((cfg.vocab_size, w))
        params["pos.seq"] = normal((cfg.max_len, w))
    else:
        kh, kw = cfg.patch.kernel
        rows, cols = patch_grid(cfg.input_shape, cfg.patch)
        params["patch.w"] = normal((w, cfg.patch.in_channels, kh, kw))
        params["patch.b"] = zeros((w,))
        params["cls"] = normal((w,))
        params["pos.start"] = normal((w,))
        params["pos.grid"] = normal((rows, cols, w))
    hidden = cfg.mlp_ratio * w
    for i in range(cfg.layers):
        pre = f"blocks.{i}."
        params[pre + "ln1.g"] = ones((w,))
        params[pre + "ln1.b"] = zeros((w,))
        params[pre + "attn.w_in"] = normal((w, 3 * w))
        params[pre + "attn.b_in"] = zeros((3 * w,))
        params[pre + "attn.w_out"] = normal((w, w))
        params[pre + "attn.b_out"] = zeros((w,))
        params[pre + "ln2.g"] = ones((w,))
        params[pre + "ln2.b"] = zeros((w,))
        params[pre + "mlp.w1"] = normal((w, hidden))
        params[pre + "mlp.b1"] = zeros((hidden,))
        params[pre + "mlp.w2"] = normal((hidden, w))
        params[pre + "mlp.b2"] = zeros((w,))
    params["ln_f.g"] = ones((w,))
    params["ln_f.b"] = zeros((w,))
    params["proj"] = normal((w, cfg.out_dim), std=w ** -0.5)
    for name, t in params.items():
        t.name = name
    return ModalEncoder(cfg, params)


def init_audio_from_image(image_enc: ModalEncoder, patch: PatchConfig,
                          input_shape: tuple) -> ModalEncoder:
    """Build an audio tower from a trained image tower.

    The patch kernel is channel-averaged to mono, the stride may overlap,
    and the positional grid is bilinearly resampled to the audio token
    grid; the sequence-start vector and all transformer weights carry
    over unchanged.
    """
    icfg = image_enc.cfg
    if icfg.modality != "image":
        raise ContractViolation("source tower must be an image encoder")
    if patch.in_channels != 1:
        raise ContractViolation("audio tower consumes 1-channel spectrograms")
    if tuple(patch.kernel) != tuple(icfg.patch.kernel):
        raise ContractViolation(
            f"kernel mismatch: image {icfg.patch.kernel} vs audio {patch.kernel}; "
            "channel averaging preserves the window size")
    cfg = EncoderConfig(
        modality="audio", width=icfg.width, layers=icfg.layers,
        heads=icfg.heads, out_dim=icfg.out_dim, mlp_ratio=icfg.mlp_ratio,
        input_shape=tuple(input_shape), patch=patch, dtype=icfg.dtype)
    grid = patch_grid(input_shape, patch)
    params: dict[str, Tensor] = {}
    for name, t in image_enc.params.items():
        if name == "patch.w":
            params[name] = Tensor(adapt_kernel_channels(t.data), name=name)
        elif name == "pos.grid":
            params[name] = Tensor(interpolate_positions(t.data, grid), name=name)
        else:
            params[name] = Tensor(t.data.copy(), name=name)
    return ModalEncoder(cfg, params)


def with_positions_for(enc: ModalEncoder, input_shape: tuple) -> ModalEncoder:
    """Copy of a patch tower with positions resampled for a new input size.

    Used to evaluate on clips longer than the pre-training duration.
    """
    if enc.cfg.modality == "text":
        raise ContractViolation("text towers have no positional grid to resample")
    grid = patch_grid(input_shape, enc.cfg.patch)
    cfg = EncoderConfig(
        modality=enc.cfg.modality, width=enc.cfg.width, layers=enc.cfg.layers,
        heads=enc.cfg.heads, out_dim=enc.cfg.out_dim,
        mlp_ratio=enc.cfg.mlp_ratio, input_shape=tuple(input_shape),
        patch=enc.cfg.patch, dtype=enc.cfg.dtype)
    params = {}
    for name, t in enc.params.items():
        if name == "pos.grid":
            params[name] = Tensor(interpolate_positions(t.data, grid), name=name)
        else:
            params[name] = Tensor(t.data.copy(), name=name)
    return ModalEncoder(cfg, params, frozen=enc.frozen)
