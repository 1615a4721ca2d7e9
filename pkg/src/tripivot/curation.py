"""Audio-text pair curation: mined, random and gold supervision.

Mining bridges each clip through the frozen image pivot: the clip's
evaluation frame is embedded by the image tower and the nearest captions
from a pool are adopted as the clip's text. Random pairing draws
captions uniformly (alignment-free control); gold pairing reads the
quarantined gold split, either full captions or bare label words.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .evaluation import encode_captions
from .seeding import substream
from .training import sample_frame
from .world import CorpusSplit, Vocab, label_caption, make_caption

PAIR_PROVENANCES = ("gold-caption", "gold-label", "mined", "random")


@dataclass
class AlignmentPair:
    """One (audio, caption) supervision edge with its provenance.

    Mined pairs carry the pivot similarity as score; other provenances
    carry none.
    """

    audio_id: str
    caption: np.ndarray
    provenance: str
    score: float | None = None

    def __post_init__(self):
        self.caption = np.asarray(self.caption, dtype=np.int32)
        if self.provenance not in PAIR_PROVENANCES:
            raise ContractViolation(f"unknown provenance {self.provenance!r}")
        if (self.score is not None) != (self.provenance == "mined"):
            raise ContractViolation(
                "mined pairs carry a score, other provenances carry none")

    def key(self) -> tuple:
        return (self.audio_id, tuple(int(t) for t in self.caption))


@dataclass
class CaptionPool:
    """Candidate captions for mining, plus the prompt used to embed them."""

    captions: list               # token id arrays
    source: str                  # "indomain" | "template" | "shifted" | custom
    prompt: str | None = None

    def __post_init__(self):
        if not self.captions:
            raise ContractViolation("caption pool must be non-empty")
        self.captions = [np.asarray(c, dtype=np.int32) for c in self.captions]

    def keys(self) -> list:
        return [tuple(int(t) for t in c) for c in self.captions]


# Pool sources mirror the mining ablation axes: captions written about
# sounds (in-domain), bare template text, and vision-flavoured text
# embedded with an image-style prompt.
POOL_STYLES = {"indomain": ("rich", "the sound of"),
               "template": ("plain", None),
               "shifted": ("vision", "a photo of")}


def build_pool(vocab: Vocab, num_classes: int, source: str, size: int,
               seed: int) -> CaptionPool:
    """Deterministic caption pool covering every class round-robin."""
    if source not in POOL_STYLES:
        raise ContractViolation(
            f"unknown pool source {source!r}; choose from {sorted(POOL_STYLES)}")
    style, prompt = POOL_STYLES[source]
    rng = substream(seed, "curation", {"indomain": 0, "template": 1,
                                       "shifted": 2}[source])
    captions = [make_caption(vocab, rng, [i % num_classes], style)
                for i in range(size)]
    return CaptionPool(captions, source, prompt)


def dedupe_pairs(pairs: list) -> list:
    """Drop exact (audio, caption) duplicates, keeping first occurrence."""
    seen = set()
    out = []
    for p in pairs:
        k = p.key()
        if k not in seen:
            seen.add(k)
            out.append(p)
    return out


def mine_pairs(records: list, image_encoder, text_encoder, pool: CaptionPool,
               max_len: int, vocab: Vocab, top_m: int = 1) -> list:
    """Pivot-mine captions for clips: nearest pool captions to each
    clip's evaluation frame under the frozen towers.  No RNG anywhere;
    ties break toward the lower pool index."""
    image_encoder.require_frozen("caption mining")
    text_encoder.require_frozen("caption mining")
    if not (1 <= top_m <= len(pool.captions)):
        raise ContractViolation(f"top_m={top_m} outside pool size")
    frames = np.stack([sample_frame(r.frames, "eval") for r in records])
    image_vecs = image_encoder.encode_batch(frames).data
    pool_vecs = encode_captions(text_encoder, vocab, pool.captions, max_len,
                                pool.prompt)
    sims = image_vecs @ pool_vecs.T
    ranking = np.argsort(-sims, axis=1, kind="stable")[:, :top_m]
    pairs = []
    for i, rec in enumerate(records):
        for c in ranking[i]:
            pairs.append(AlignmentPair(rec.record_id, pool.captions[c],
                                       "mined", float(sims[i, c])))
    return dedupe_pairs(pairs)


def random_pairs(audio_ids: list, pool: CaptionPool, seed: int) -> list:
    """Uniformly random captions per clip: breaks alignment, keeps text
    marginals."""
    rng = substream(seed, "curation", 3)
    picks = rng.integers(0, len(pool.captions), size=len(audio_ids))
    return [AlignmentPair(aid, pool.captions[int(c)], "random")
            for aid, c in zip(audio_ids, picks)]


def gold_pairs(world: CorpusSplit, mode: str = "caption") -> list:
    """All gold supervision pairs from the quarantined split.

    mode "caption": one pair per (clip, gold caption); mode "label":
    one pair per clip with the label words as a minimal caption.  Only
    the AT stage may consume these; the quarantine is lifted here.
    """
    records = world.at_gold.open("AT")
    if mode == "caption":
        return [AlignmentPair(r.record_id, cap, "gold-caption")
                for r in records for cap in r.captions]
    if mode == "label":
        return [AlignmentPair(r.record_id,
                              label_caption(world.vocab, r.label_set),
                              "gold-label")
                for r in records]
    raise ContractViolation(f"unknown gold mode {mode!r}")


def fewshot_subset(pairs: list, n: int, seed: int) -> list:
    """First n pairs of the seed's fixed permutation.

    The same seed yields nested subsets: subset(n) is a prefix of
    subset(m) for n <= m, which is what a few-shot ladder needs.
    """
    if not (0 < n <= len(pairs)):
        raise ContractViolation(
            f"subset size {n} outside [1, {len(pairs)}]")
    perm = substream(seed, "fewshot").permutation(len(pairs))
    return [pairs[i] for i in perm[:n]]


# ---- pair files ------------------------------------------------------------


def save_pairs(path, pairs: list) -> None:
    """JSON lines, one pair per line, provenance preserved."""
    with open(path, "w") as f:
        for p in pairs:
            row = {"audio_id": p.audio_id, "caption": p.caption.tolist(),
                   "provenance": p.provenance}
            if p.score is not None:
                row["score"] = p.score
            f.write(json.dumps(row, sort_keys=True) + "\n")


def load_pairs(path) -> list:
    pairs = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        pairs.append(AlignmentPair(row["audio_id"],
                                   np.array(row["caption"], dtype=np.int32),
                                   row["provenance"], row.get("score")))
    return pairs
