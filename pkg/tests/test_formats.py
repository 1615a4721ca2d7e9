"""Round-trip every on-disk format and pin the byte-level layout."""

import json
import struct

import numpy as np
import pytest

from tripivot import ContractViolation
from tripivot.fbank import WaveformClip
from tripivot.formats import (dump_json, load_json, read_embeddings,
                              read_frames, read_params, read_raw_f32,
                              read_spectrogram, read_wav, write_embeddings,
                              write_frames, write_params, write_raw_f32,
                              write_spectrogram, write_wav)


def test_json_sorted_keys_trailing_newline(tmp_path):
    path = tmp_path / "x.json"
    dump_json({"zeta": 1, "alpha": {"b": 2, "a": 3}}, path)
    text = path.read_text()
    assert text.endswith("\n")
    assert text.index('"alpha"') < text.index('"zeta"')
    assert load_json(path) == {"zeta": 1, "alpha": {"b": 2, "a": 3}}


def test_wav_round_trip_quantized(tmp_path):
    sr = 4000
    t = np.arange(800) / sr
    clip = WaveformClip(np.sin(2 * np.pi * 440 * t).astype(np.float32), sr)
    path = tmp_path / "a.wav"
    write_wav(path, clip)
    back = read_wav(path)
    assert back.sample_rate == sr
    assert back.samples.shape == (800,)
    # 16-bit quantization plus the 32767/32768 write/read scale skew
    assert np.max(np.abs(back.samples - clip.samples)) < 2.0 / 32768


def test_wav_rejects_non_16bit(tmp_path):
    import wave
    path = tmp_path / "b.wav"
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(1)
        w.setframerate(4000)
        w.writeframes(bytes(100))
    with pytest.raises(ContractViolation, match="16-bit"):
        read_wav(path)


def test_raw_f32_round_trip_exact(tmp_path):
    rng = np.random.default_rng(3)
    clip = WaveformClip(rng.normal(0, 0.1, 500).astype(np.float32), 4000)
    path = tmp_path / "c.f32"
    write_raw_f32(path, clip)
    back = read_raw_f32(path)
    assert back.sample_rate == 4000
    assert np.array_equal(back.samples, clip.samples)


def test_raw_f32_sidecar_mismatch(tmp_path):
    clip = WaveformClip(np.zeros(100, dtype=np.float32), 4000)
    path = tmp_path / "d.f32"
    write_raw_f32(path, clip)
    meta = json.loads((tmp_path / "d.f32.json").read_text())
    meta["length"] = 99
    (tmp_path / "d.f32.json").write_text(json.dumps(meta))
    with pytest.raises(ContractViolation, match="length mismatch"):
        read_raw_f32(path)


def test_spectrogram_round_trip_and_header(tmp_path):
    rng = np.random.default_rng(1)
    spec = rng.normal(size=(13, 7)).astype(np.float32)
    path = tmp_path / "s.bin"
    write_spectrogram(path, spec)
    blob = path.read_bytes()
    assert struct.unpack_from("<II", blob, 0) == (13, 7)
    assert len(blob) == 8 + 13 * 7 * 4
    assert np.array_equal(read_spectrogram(path), spec)


def test_spectrogram_truncated_payload(tmp_path):
    path = tmp_path / "s.bin"
    write_spectrogram(path, np.zeros((4, 4), dtype=np.float32))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ContractViolation, match="header says"):
        read_spectrogram(path)


def test_frames_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    frames = rng.normal(size=(3, 8, 8, 3)).astype(np.float32)
    path = tmp_path / "f.bin"
    write_frames(path, frames)
    assert len(path.read_bytes()) == 16 + frames.size * 4
    assert np.array_equal(read_frames(path), frames)
    with pytest.raises(ContractViolation):
        write_frames(tmp_path / "g.bin", np.zeros((2, 2)))


def test_embeddings_round_trip_unicode_ids(tmp_path):
    rng = np.random.default_rng(4)
    ids = ["clip-0", "img#c1", "téxt-2"]
    modalities = ["audio", "image", "text"]
    vectors = rng.normal(size=(3, 5)).astype(np.float32)
    path = tmp_path / "e.bin"
    write_embeddings(path, ids, modalities, vectors)
    got_ids, got_mods, got_vecs = read_embeddings(path)
    assert got_ids == ids
    assert got_mods == modalities
    assert np.array_equal(got_vecs, vectors)


def test_embeddings_alignment_checked(tmp_path):
    with pytest.raises(ContractViolation, match="align"):
        write_embeddings(tmp_path / "e.bin", ["a"], ["audio", "text"],
                         np.zeros((1, 3), dtype=np.float32))


def test_params_round_trip_preserves_order_and_shapes(tmp_path):
    rng = np.random.default_rng(6)
    entries = [
        ("blocks.0.w", rng.normal(size=(4, 4)).astype(np.float32)),
        ("scale", np.float32(1.25).reshape(())),
        ("proj", rng.normal(size=(4, 2)).astype(np.float32)),
    ]
    prefix = tmp_path / "ckpt"
    write_params(prefix, entries, manifest_extra={"stage": "VT", "epoch": 3})
    manifest, tensors = read_params(prefix)
    assert manifest["stage"] == "VT"
    assert manifest["epoch"] == 3
    assert [e["name"] for e in manifest["tensors"]] == \
        ["blocks.0.w", "scale", "proj"]
    assert list(tensors) == ["blocks.0.w", "scale", "proj"]
    for name, arr in entries:
        assert tensors[name].shape == np.asarray(arr).shape
        assert np.array_equal(tensors[name], np.asarray(arr, dtype=np.float32))


def test_params_blob_is_dense_concatenation(tmp_path):
    entries = [("a", np.arange(4, dtype=np.float32).reshape(2, 2)),
               ("b", np.arange(3, dtype=np.float32))]
    prefix = tmp_path / "p"
    write_params(prefix, entries)
    blob = np.frombuffer((tmp_path / "p.bin").read_bytes(), dtype="<f4")
    assert np.array_equal(blob, np.arange(4, dtype=np.float32).tolist()
                          + np.arange(3, dtype=np.float32).tolist())
    manifest = load_json(str(prefix) + ".json")
    assert manifest["tensors"][1]["offset"] == 4


def test_write_is_deterministic(tmp_path):
    rng = np.random.default_rng(7)
    vecs = rng.normal(size=(4, 3)).astype(np.float32)
    p1, p2 = tmp_path / "one.bin", tmp_path / "two.bin"
    write_embeddings(p1, ["a", "b", "c", "d"], ["audio"] * 4, vecs)
    write_embeddings(p2, ["a", "b", "c", "d"], ["audio"] * 4, vecs)
    assert p1.read_bytes() == p2.read_bytes()
