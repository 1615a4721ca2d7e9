"""On-disk binary formats: waveforms, spectrograms, embeddings, parameters.

Everything is little-endian and fully deterministic so re-runs produce
byte-identical artifacts.  JSON sidecars and manifests are written with
sorted keys and a trailing newline for the same reason.
"""

import json
import struct
import wave
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .fbank import WaveformClip

MODALITY_BYTES = {"image": 0, "audio": 1, "text": 2}
_BYTE_MODALITY = {v: k for k, v in MODALITY_BYTES.items()}


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())


# ---- waveforms -------------------------------------------------------------


def read_wav(path) -> WaveformClip:
    """Read a PCM WAV file; 16-bit samples are scaled to [-1, 1]."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ContractViolation(
                f"only 16-bit PCM WAV is supported, got {8 * w.getsampwidth()}-bit")
        sr = w.getframerate()
        channels = w.getnchannels()
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    if channels > 1:
        samples = samples.reshape(-1, channels)
    return WaveformClip(samples, sr)


def write_wav(path, clip: WaveformClip) -> None:
    """Write channel 0 as mono 16-bit PCM."""
    mono = np.clip(clip.mono(), -1.0, 1.0)
    pcm = (mono * 32767.0).round().astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())


def write_raw_f32(path, clip: WaveformClip) -> None:
    """Raw float32 little-endian samples plus a JSON sidecar."""
    mono = clip.mono().astype("<f4")
    Path(path).write_bytes(mono.tobytes())
    dump_json({"sample_rate": clip.sample_rate, "length": int(mono.size)},
              str(path) + ".json")


def read_raw_f32(path) -> WaveformClip:
    meta = load_json(str(path) + ".json")
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if data.size != meta["length"]:
        raise ContractViolation(
            f"raw waveform length mismatch: sidecar says {meta['length']}, "
            f"file holds {data.size}")
    return WaveformClip(data.copy(), int(meta["sample_rate"]))


# ---- spectrogram dumps -----------------------------------------------------


def write_spectrogram(path, values: np.ndarray) -> None:
    """8-byte header (u32 frames, u32 bins, little-endian) + row-major f32."""
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ContractViolation("spectrogram dump expects a 2-D array")
    t, f = values.shape
    Path(path).write_bytes(struct.pack("<II", t, f)
                           + np.ascontiguousarray(values).tobytes())


def read_spectrogram(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    t, f = struct.unpack_from("<II", blob, 0)
    data = np.frombuffer(blob, dtype="<f4", offset=8)
    if data.size != t * f:
        raise ContractViolation(
            f"spectrogram payload has {data.size} values, header says {t}x{f}")
    return data.reshape(t, f).copy()


# ---- frame stacks (image tensors) ------------------------------------------


def write_frames(path, frames: np.ndarray) -> None:
    """16-byte header (u32 n, h, w, c) + row-major float32 frames."""
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 4:
        raise ContractViolation("frame stack dump expects a 4-D array")
    Path(path).write_bytes(struct.pack("<IIII", *frames.shape)
                           + np.ascontiguousarray(frames).tobytes())


def read_frames(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    shape = struct.unpack_from("<IIII", blob, 0)
    data = np.frombuffer(blob, dtype="<f4", offset=16)
    if data.size != int(np.prod(shape)):
        raise ContractViolation("frame stack payload does not match header")
    return data.reshape(shape).copy()


# ---- embedding dumps -------------------------------------------------------


def write_embeddings(path, ids: list, modalities: list, vectors: np.ndarray) -> None:
    """One record per item: u16 id length, utf-8 id, modality byte, d floats.

    An 8-byte header (u32 count, u32 dim) makes the file self-describing.
    """
    vectors = np.asarray(vectors, dtype="<f4")
    if vectors.ndim != 2 or len(ids) != vectors.shape[0] or len(modalities) != len(ids):
        raise ContractViolation("ids, modalities and vectors must align")
    parts = [struct.pack("<II", vectors.shape[0], vectors.shape[1])]
    for item_id, modality, vec in zip(ids, modalities, vectors):
        encoded = str(item_id).encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("B", MODALITY_BYTES[modality]))
        parts.append(vec.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_embeddings(path):
    """Returns (ids, modalities, vectors)."""
    blob = Path(path).read_bytes()
    count, dim = struct.unpack_from("<II", blob, 0)
    pos = 8
    ids, modalities = [], []
    vectors = np.empty((count, dim), dtype=np.float32)
    for i in range(count):
        (id_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        ids.append(blob[pos:pos + id_len].decode("utf-8"))
        pos += id_len
        modalities.append(_BYTE_MODALITY[blob[pos]])
        pos += 1
        vectors[i] = np.frombuffer(blob, dtype="<f4", count=dim, offset=pos)
        pos += 4 * dim
    return ids, modalities, vectors


# ---- parameter blobs -------------------------------------------------------


def write_params(prefix, entries: list, manifest_extra: dict | None = None) -> None:
    """Write `<prefix>.json` (manifest) and `<prefix>.bin` (flat f32 blob).

    `entries` is an ordered list of (name, ndarray).  The manifest holds
    the tensor table (name, shape, offset in float32 units) so the blob
    can be sliced back without guessing.
    """
    table = []
    offset = 0
    chunks = []
    for name, arr in entries:
        arr = np.asarray(arr, dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(np.ascontiguousarray(arr).tobytes())
    manifest = dict(manifest_extra or {})
    manifest["tensors"] = table
    dump_json(manifest, str(prefix) + ".json")
    Path(str(prefix) + ".bin").write_bytes(b"".join(chunks))


def read_params(prefix):
    """Returns (manifest dict, ordered {name: ndarray})."""
    manifest = load_json(str(prefix) + ".json")
    blob = np.frombuffer(Path(str(prefix) + ".bin").read_bytes(), dtype="<f4")
    tensors = {}
    for entry in manifest["tensors"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        tensors[entry["name"]] = (blob[start:start + size]
                                  .reshape(entry["shape"]).copy())
    return manifest, tensors
