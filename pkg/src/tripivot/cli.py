"""Command-line pipeline: world generation, staged training, evaluation.

Every subcommand accepts --seed, --config and --out, appends a stage
record (command, config hash, input/output artifact hashes, wall time)
to the pipeline manifest, and exits 0 on success, 1 on any broken
contract with a diagnostic on stderr, 2 on usage errors.  Re-running a
stage with the same seed and config writes byte-identical artifacts;
only the manifest's wall times differ.
"""

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .curation import (build_pool, fewshot_subset, gold_pairs, load_pairs,
                       mine_pairs, random_pairs, save_pairs)
from .encoders import init_audio_from_image, init_encoder, with_positions_for
from .errors import ContractViolation
from .evaluation import (EvalReport, encode_audio, encode_captions,
                         encode_images, encode_label_prompts, fit_scaling,
                         mean_average_precision, pivotability_probe,
                         read_csv, recall_at_k, va_retrieval_check, write_csv,
                         zero_shot_accuracy, zero_shot_classify)
from .fbank import compute_fbank, num_frames
from .formats import dump_json, load_json, write_embeddings
from .seeding import substream
from .training import (StageData, compute_corpus_stats, load_checkpoint,
                       run_stage, spec_bank)
from .world import CLASS_WORDS, generate_world, load_world, save_world

COMMANDS = ("gen-world", "pretrain-vt", "pretrain-va", "finetune-at",
            "curate", "eval-retrieval", "eval-zeroshot", "eval-map",
            "probe-pivotability", "fit-scaling", "report")


# ---- pipeline manifest -----------------------------------------------------


def hash_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_path(path) -> str:
    """File hash, or for a directory the hash of its sorted file hashes."""
    path = Path(path)
    if path.is_file():
        return hash_file(path)
    if path.is_dir():
        h = hashlib.sha256()
        for sub in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(sub.relative_to(path)).encode())
            h.update(bytes.fromhex(hash_file(sub)))
        return h.hexdigest()
    raise ContractViolation(f"missing artifact: {path}")


class PipelineManifest:
    """Append-only ordered log of stage records."""

    def __init__(self, path):
        self.path = Path(path)

    def append(self, record: dict) -> None:
        doc = {"records": []}
        if self.path.exists():
            doc = load_json(self.path)
        doc["records"].append(record)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        dump_json(doc, self.path)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# ---- shared loading --------------------------------------------------------


def _ckpt_prefix(path) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / "ckpt-final"
    return path


def _load_ckpt(path, missing_msg=None):
    prefix = _ckpt_prefix(path)
    if not Path(str(prefix) + ".json").exists():
        raise ContractViolation(missing_msg or f"missing checkpoint: {prefix}")
    return load_checkpoint(prefix)


def _need_world(args):
    if not args.world:
        raise ContractViolation("this command needs --world")
    return load_world(args.world)


def _need_audio(encoders, stats, where):
    if "audio" not in encoders:
        raise ContractViolation(f"{where} has no audio tower")
    if stats is None:
        raise ContractViolation(f"{where} lacks corpus statistics")


def _eval_splits(world, name):
    if name == "core":
        return world.eval_core
    if name == "shifted":
        return world.eval_shifted
    raise ContractViolation(f"unknown eval split {name!r}")


def _caption_items(records):
    """Flatten records into (caption_id, record_id, tokens) triples."""
    items = []
    for rec in records:
        for j, cap in enumerate(rec.captions):
            items.append((f"{rec.record_id}#c{j}", rec.record_id, cap))
    return items


def _shifted_audio_encoder(enc, world, records):
    clip = records[0].clip
    cfgw = world.config
    sr = clip.sample_rate
    window = int(round(sr * cfgw.window_ms / 1000.0))
    shift = int(round(sr * cfgw.frame_shift_ms / 1000.0))
    shape = (num_frames(clip.samples.shape[0], window, shift), cfgw.mel_bins)
    if shape == tuple(enc.cfg.input_shape):
        return enc
    return with_positions_for(enc, shape)


# ---- handlers --------------------------------------------------------------


def cmd_gen_world(args, cfg):
    wcfg = cfgmod.world_config(cfg)
    world = generate_world(wcfg, args.seed)
    save_world(world, args.out)
    return {}, {"world": args.out}


def cmd_pretrain_vt(args, cfg):
    world = _need_world(args)
    image = init_encoder(cfgmod.image_encoder_config(cfg),
                         substream(args.seed, "init", 0))
    text = init_encoder(cfgmod.text_encoder_config(cfg, len(world.vocab)),
                        substream(args.seed, "init", 1))
    scfg = cfgmod.stage_config(cfg, "VT", args.seed)
    data = StageData(records=world.vt_train, vocab=world.vocab,
                     max_len=cfgmod.get_int(cfg, "encoder.max_len"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_stage(scfg, data, {"image": image, "text": text},
              out_dir=out, log_path=out / "train-log.jsonl")
    return {"world": args.world}, {"run": args.out}


def cmd_pretrain_va(args, cfg):
    world = _need_world(args)
    if not args.init:
        raise ContractViolation("pretrain-va needs --init (image-text run)")
    encoders, _, _, _, _ = _load_ckpt(args.init)
    if "image" not in encoders or "text" not in encoders:
        raise ContractViolation(
            f"{args.init} must hold trained image and text towers")
    encoders["image"].set_frozen(True)
    encoders["text"].set_frozen(True)
    if cfgmod.get_str(cfg, "encoder.audio_init") == "random":
        audio = init_encoder(cfgmod.audio_encoder_config(cfg),
                             substream(args.seed, "init", 2))
    else:
        audio = init_audio_from_image(encoders["image"],
                                      cfgmod.audio_patch_config(cfg),
                                      cfgmod.audio_input_shape(cfg))
    encoders["audio"] = audio
    stats = compute_corpus_stats(world.va_train, world.config)
    data = StageData(records=world.va_train,
                     specs=spec_bank(world.va_train, world.config, stats),
                     vocab=world.vocab,
                     max_len=cfgmod.get_int(cfg, "encoder.max_len"),
                     stats=stats)
    if cfgmod.get_bool(cfg, "va.alternate_vt"):
        data.vt_records = world.vt_train
    scfg = cfgmod.stage_config(cfg, "VA", args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_stage(scfg, data, encoders, out_dir=out,
              log_path=out / "train-log.jsonl")
    return {"world": args.world, "init": args.init}, {"run": args.out}


def cmd_finetune_at(args, cfg):
    world = _need_world(args)
    if not args.init:
        raise ContractViolation("missing VA checkpoint: pass --init")
    encoders, temperature, stats, manifest, _ = _load_ckpt(
        args.init, missing_msg=f"missing VA checkpoint: {_ckpt_prefix(args.init)}")
    if "audio" not in encoders:
        raise ContractViolation(
            f"missing VA checkpoint: {args.init} holds no audio tower")
    _need_audio(encoders, stats, f"checkpoint {args.init}")
    if not args.pairs:
        raise ContractViolation("finetune-at needs --pairs")
    pairs = load_pairs(args.pairs)
    if not pairs:
        raise ContractViolation(f"no pairs in {args.pairs}")
    encoders["audio"].set_frozen(False)
    encoders["text"].set_frozen(True)
    if "image" in encoders:
        encoders["image"].set_frozen(True)
    lookup = world.record_index("AT")
    unknown = [p.audio_id for p in pairs if p.audio_id not in lookup]
    if unknown:
        raise ContractViolation(
            f"pairs reference unknown clips, e.g. {unknown[:3]}")
    needed = {p.audio_id for p in pairs}
    records = [lookup[rid] for rid in sorted(needed)]
    data = StageData(pairs=pairs,
                     specs=spec_bank(records, world.config, stats),
                     vocab=world.vocab,
                     max_len=cfgmod.get_int(cfg, "encoder.max_len"),
                     audio_lookup=lookup, stats=stats)
    scfg = cfgmod.stage_config(cfg, "AT", args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_stage(scfg, data, encoders, temperature=temperature, out_dir=out,
              log_path=out / "train-log.jsonl")
    return ({"world": args.world, "init": args.init, "pairs": args.pairs},
            {"run": args.out})


def cmd_curate(args, cfg):
    world = _need_world(args)
    mode = args.mode or cfgmod.get_str(cfg, "curate.mode")
    inputs = {"world": args.world}
    if mode in ("gold-caption", "gold-label"):
        pairs = gold_pairs(world, mode.split("-", 1)[1])
    elif mode == "random":
        audio_ids = [r.record_id for r in world.at_gold.open("AT")]
        pool = build_pool(world.vocab, world.config.num_classes,
                          cfgmod.get_str(cfg, "curate.pool"),
                          cfgmod.get_int(cfg, "curate.pool_size"), args.seed)
        pairs = random_pairs(audio_ids, pool, args.seed)
    elif mode == "mined":
        if not args.encoders:
            raise ContractViolation("mined curation needs --encoders")
        encoders, _, _, _, _ = _load_ckpt(args.encoders)
        if "image" not in encoders or "text" not in encoders:
            raise ContractViolation(
                f"{args.encoders} must hold image and text towers")
        encoders["image"].set_frozen(True)
        encoders["text"].set_frozen(True)
        pool = build_pool(world.vocab, world.config.num_classes,
                          cfgmod.get_str(cfg, "curate.pool"),
                          cfgmod.get_int(cfg, "curate.pool_size"), args.seed)
        pairs = mine_pairs(world.va_train, encoders["image"],
                           encoders["text"], pool,
                           cfgmod.get_int(cfg, "encoder.max_len"),
                           world.vocab, cfgmod.get_int(cfg, "curate.top_m"))
        inputs["encoders"] = args.encoders
    else:
        raise ContractViolation(f"unknown curation mode {mode!r}")
    count = cfgmod.get_int(cfg, "curate.count")
    if count:
        pairs = fewshot_subset(pairs, count, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_pairs(args.out, pairs)
    return inputs, {"pairs": args.out}


def cmd_eval_retrieval(args, cfg):
    world = _need_world(args)
    encoders, _, stats, _, _ = _load_ckpt(args.encoders)
    pair = args.pair or cfgmod.get_str(cfg, "eval.pair")
    split = args.split or cfgmod.get_str(cfg, "eval.split")
    records = _eval_splits(world, split)
    max_len = cfgmod.get_int(cfg, "encoder.max_len")
    for enc in encoders.values():
        enc.set_frozen(True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, metrics, dump = [], {}, []

    def run_directions(tag, a_ids, a_vecs, b_ids, b_vecs, gold_ab, gold_ba):
        kmax = min(10, len(b_ids))
        fwd = recall_at_k(a_ids, a_vecs, b_ids, b_vecs, gold_ab, kmax)
        kmax = min(10, len(a_ids))
        rev = recall_at_k(b_ids, b_vecs, a_ids, a_vecs, gold_ba, kmax)
        for name, res in ((f"{tag[0]}2{tag[1]}", fwd), (f"{tag[1]}2{tag[0]}", rev)):
            metrics[f"{name}_r1"] = res.r_at_1
            if res.r_at_10 is not None:
                metrics[f"{name}_r10"] = res.r_at_10
            rows.append({"direction": name, "r_at_1": res.r_at_1,
                         "r_at_10": res.r_at_10,
                         "queries": len(res.query_ids),
                         "candidates": len(res.cand_ids)})
        return fwd, rev

    if pair in ("at", "va"):
        _need_audio(encoders, stats, f"checkpoint {args.encoders}")
        audio_enc = _shifted_audio_encoder(encoders["audio"], world, records)
        a_ids = [r.record_id for r in records]
        a_vecs = encode_audio(audio_enc, records, world.config, stats)
        dump += [(i, "audio", v) for i, v in zip(a_ids, a_vecs)]
    if pair in ("at", "vt"):
        caps = _caption_items(records)
        t_ids = [cid for cid, _, _ in caps]
        t_vecs = encode_captions(encoders["text"], world.vocab,
                                 [tok for _, _, tok in caps], max_len)
        gold_fwd = {r.record_id: {cid for cid, rid, _ in caps
                                  if rid == r.record_id} for r in records}
        gold_rev = {cid: {rid} for cid, rid, _ in caps}
        dump += [(i, "text", v) for i, v in zip(t_ids, t_vecs)]
    if pair in ("vt", "va"):
        v_ids = [f"{r.record_id}#img" for r in records]
        v_vecs = encode_images(encoders["image"], records)
        dump += [(i, "image", v) for i, v in zip(v_ids, v_vecs)]

    if pair == "at":
        run_directions("at", a_ids, a_vecs, t_ids, t_vecs, gold_fwd, gold_rev)
    elif pair == "vt":
        gold_v = {f"{r.record_id}#img": {cid for cid, rid, _ in caps
                                         if rid == r.record_id} for r in records}
        gold_t = {cid: {f"{rid}#img"} for cid, rid, _ in caps}
        run_directions("vt", v_ids, v_vecs, t_ids, t_vecs, gold_v, gold_t)
    elif pair == "va":
        gold_v = {vid: {rid} for vid, rid in zip(v_ids, a_ids)}
        gold_a = {rid: {vid} for vid, rid in zip(v_ids, a_ids)}
        run_directions("va", v_ids, v_vecs, a_ids, a_vecs, gold_v, gold_a)
        labels = [sorted(r.label_set) for r in records]
        metrics["v2a_label_precision_at_1"] = va_retrieval_check(
            v_vecs, labels, a_vecs, labels, k=1)
    else:
        raise ContractViolation(f"unknown retrieval pair {pair!r}")

    write_embeddings(out / "embeddings.bin",
                     [d[0] for d in dump], [d[1] for d in dump],
                     [d[2] for d in dump])
    report = EvalReport(name=f"retrieval-{pair}-{split}",
                        config={"pair": pair, "split": split,
                                "seed": args.seed},
                        metrics=metrics, tables={"directions": rows})
    report.save(out / "report.json")
    return ({"world": args.world, "encoders": args.encoders},
            {"report": args.out})


def cmd_eval_zeroshot(args, cfg):
    world = _need_world(args)
    encoders, _, stats, _, _ = _load_ckpt(args.encoders)
    _need_audio(encoders, stats, f"checkpoint {args.encoders}")
    for enc in encoders.values():
        enc.set_frozen(True)
    split = args.split or cfgmod.get_str(cfg, "eval.split")
    records = _eval_splits(world, split)
    prompt = cfgmod.get_str(cfg, "eval.prompt")
    max_len = cfgmod.get_int(cfg, "encoder.max_len")
    audio_enc = _shifted_audio_encoder(encoders["audio"], world, records)
    a_vecs = encode_audio(audio_enc, records, world.config, stats)
    k = world.config.num_classes
    label_vecs = encode_label_prompts(encoders["text"], world.vocab,
                                      CLASS_WORDS[:k], max_len, prompt)
    truth = [min(r.label_set) for r in records]
    pred = zero_shot_classify(a_vecs, label_vecs)
    accuracy = float((pred == truth).mean()) if len(records) else 0.0
    per_class = []
    for c in range(k):
        mask = [t == c for t in truth]
        if any(mask):
            acc = float((pred[mask] == c).mean())
            per_class.append({"class": CLASS_WORDS[c], "accuracy": acc,
                              "count": int(sum(mask))})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = EvalReport(name=f"zeroshot-{split}",
                        config={"prompt": prompt, "split": split,
                                "seed": args.seed},
                        metrics={"accuracy": accuracy,
                                 "chance": 1.0 / k,
                                 "oracle_floor": world.oracle_accuracy},
                        tables={"per_class": per_class})
    report.save(out / "report.json")
    return ({"world": args.world, "encoders": args.encoders},
            {"report": args.out})


def cmd_eval_map(args, cfg):
    world = _need_world(args)
    encoders, _, stats, _, _ = _load_ckpt(args.encoders)
    _need_audio(encoders, stats, f"checkpoint {args.encoders}")
    for enc in encoders.values():
        enc.set_frozen(True)
    records = world.eval_multi
    if not records:
        raise ContractViolation("world has no multi-label eval split")
    prompt = cfgmod.get_str(cfg, "eval.prompt")
    max_len = cfgmod.get_int(cfg, "encoder.max_len")
    k = world.config.num_classes
    a_vecs = encode_audio(encoders["audio"], records, world.config, stats)
    label_vecs = encode_label_prompts(encoders["text"], world.vocab,
                                      CLASS_WORDS[:k], max_len, prompt)
    scores = a_vecs @ label_vecs.T
    result = mean_average_precision(scores, [r.label_set for r in records], k)
    per_class = [{"class": CLASS_WORDS[c], "ap": ap}
                 for c, ap in sorted(result.per_class.items())]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = EvalReport(name="zeroshot-map",
                        config={"prompt": prompt, "seed": args.seed},
                        metrics={"map": result.value,
                                 "excluded_classes": len(result.excluded)},
                        tables={"per_class": per_class})
    report.save(out / "report.json")
    return ({"world": args.world, "encoders": args.encoders},
            {"report": args.out})


def cmd_probe_pivotability(args, cfg):
    world = _need_world(args)
    encoders, _, stats, _, _ = _load_ckpt(args.encoders)
    _need_audio(encoders, stats, f"checkpoint {args.encoders}")
    if "image" not in encoders or "text" not in encoders:
        raise ContractViolation("pivotability needs image and text towers")
    for enc in encoders.values():
        enc.set_frozen(True)
    records = world.eval_core
    max_len = cfgmod.get_int(cfg, "encoder.max_len")
    k = args.k or cfgmod.get_int(cfg, "eval.pivot_k")
    a_vecs = encode_audio(encoders["audio"], records, world.config, stats)
    v_vecs = encode_images(encoders["image"], records)
    caps = _caption_items(records)
    t_vecs = encode_captions(encoders["text"], world.vocab,
                             [tok for _, _, tok in caps], max_len)
    keys = [tuple(int(t) for t in tok) for _, _, tok in caps]
    gold = [{tuple(int(t) for t in cap) for cap in r.captions}
            for r in records]
    scores = pivotability_probe([r.record_id for r in records], a_vecs,
                                v_vecs, t_vecs, keys, gold, k)
    per_audio = [{"audio_id": s.audio_id, "k": s.k, "value": s.value,
                  "pivotable": int(s.pivotable)} for s in scores]
    by_class = []
    for c in sorted({min(r.label_set) for r in records}):
        vals = [s.value for s, r in zip(scores, records)
                if min(r.label_set) == c]
        flags = [s.pivotable for s, r in zip(scores, records)
                 if min(r.label_set) == c]
        by_class.append({"class": CLASS_WORDS[c],
                         "mean_value": float(sum(vals) / len(vals)),
                         "pivotable_fraction": float(sum(flags) / len(flags)),
                         "count": len(vals)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = EvalReport(
        name="pivotability",
        config={"k": k, "seed": args.seed},
        metrics={"mean_value": float(sum(s.value for s in scores) / len(scores)),
                 "pivotable_fraction": float(sum(s.pivotable for s in scores)
                                             / len(scores))},
        tables={"per_audio": per_audio, "by_class": by_class})
    report.save(out / "report.json")
    return ({"world": args.world, "encoders": args.encoders},
            {"report": args.out})


def cmd_fit_scaling(args, cfg):
    if not args.ladder:
        raise ContractViolation("fit-scaling needs --ladder (rungs CSV)")
    rows = read_csv(args.ladder)
    if not rows:
        raise ContractViolation(f"no rungs in {args.ladder}")
    try:
        counts = [int(r["pair_count"]) for r in rows]
        metrics = [float(r["metric"]) for r in rows]
    except KeyError as e:
        raise ContractViolation(
            f"ladder CSV needs pair_count and metric columns, missing {e}")
    fit = fit_scaling(counts, metrics, args.target)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rung_rows = [{"pair_count": c, "metric": m,
                  "fitted": fit.slope * float(np.log2(c)) + fit.intercept,
                  "slope": fit.slope, "intercept": fit.intercept}
                 for c, m in zip(counts, metrics)]
    report = EvalReport(
        name="scaling-fit",
        config={"target": args.target, "seed": args.seed},
        metrics={"slope": fit.slope, "intercept": fit.intercept,
                 "r_squared": fit.r_squared,
                 "extrapolated_count": fit.extrapolated_count,
                 "extrapolated": fit.extrapolated},
        tables={"rungs": rung_rows})
    report.save(out / "report.json")
    return {"ladder": args.ladder}, {"report": args.out}


def cmd_report(args, cfg):
    if not args.inputs:
        raise ContractViolation("report needs --inputs (directory of reports)")
    return {"inputs": args.inputs}, {"bundle": emit_report(args.inputs, args.out)}


def emit_report(inputs_dir, out_dir) -> str:
    """Bundle every EvalReport under inputs_dir: one summary CSV row per
    (report, metric) plus an index JSON with content hashes."""
    inputs = Path(inputs_dir)
    reports = []
    for path in sorted(inputs.rglob("*.json")):
        try:
            doc = load_json(path)
        except json.JSONDecodeError:
            continue
        if isinstance(doc, dict) and "metrics" in doc and "name" in doc:
            reports.append((path, doc))
    if not reports:
        raise ContractViolation(f"no evaluation reports under {inputs}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    index = []
    for path, doc in reports:
        for metric, value in sorted(doc["metrics"].items()):
            rows.append({"report": doc["name"], "metric": metric,
                         "value": value})
        index.append({"name": doc["name"],
                      "path": str(path.relative_to(inputs)),
                      "sha256": hash_file(path)})
    write_csv(out / "summary.csv", rows)
    dump_json({"reports": index}, out / "index.json")
    return str(out)


# ---- dispatch --------------------------------------------------------------

HANDLERS = {
    "gen-world": cmd_gen_world,
    "pretrain-vt": cmd_pretrain_vt,
    "pretrain-va": cmd_pretrain_va,
    "finetune-at": cmd_finetune_at,
    "curate": cmd_curate,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-zeroshot": cmd_eval_zeroshot,
    "eval-map": cmd_eval_map,
    "probe-pivotability": cmd_probe_pivotability,
    "fit-scaling": cmd_fit_scaling,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tripivot",
        description="Audio-text alignment through a shared image pivot.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None,
                       help="key = value file; env TRIPIVOT_* overrides")
        p.add_argument("--out", required=True)
        p.add_argument("--manifest", default="pipeline-manifest.json")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker cap; execution is sequential and "
                            "seeding is per-record, so results never "
                            "depend on this")
        p.add_argument("--world", default=None)
        if name in ("pretrain-va", "finetune-at"):
            p.add_argument("--init", default=None,
                           help="checkpoint prefix or run directory")
        if name == "finetune-at":
            p.add_argument("--pairs", default=None)
        if name == "curate":
            p.add_argument("--mode", default=None,
                           choices=["gold-caption", "gold-label", "mined",
                                    "random"])
        if name in ("curate", "eval-retrieval", "eval-zeroshot", "eval-map",
                    "probe-pivotability"):
            p.add_argument("--encoders", default=None,
                           help="checkpoint prefix or run directory")
        if name == "eval-retrieval":
            p.add_argument("--pair", default=None, choices=["at", "vt", "va"])
        if name in ("eval-retrieval", "eval-zeroshot"):
            p.add_argument("--split", default=None,
                           choices=["core", "shifted"])
        if name == "probe-pivotability":
            p.add_argument("--k", type=int, default=None)
        if name == "fit-scaling":
            p.add_argument("--ladder", default=None,
                           help="CSV with pair_count and metric columns")
            p.add_argument("--target", type=float, default=None)
        if name == "report":
            p.add_argument("--inputs", default=None)
    return parser


def cli_dispatch(argv) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.jobs < 1:
            raise ContractViolation("--jobs must be >= 1")
        cfg = cfgmod.load_config(args.config)
        started = time.time()
        inputs, outputs = HANDLERS[args.command](args, cfg)
        record = {
            "command": args.command,
            "seed": args.seed,
            "config_sha256": config_hash(cfg),
            "inputs": {k: hash_path(v) for k, v in inputs.items()},
            "outputs": {k: hash_path(v) for k, v in outputs.items()},
            "wall_time_s": round(time.time() - started, 3),
        }
        PipelineManifest(args.manifest).append(record)
        return 0
    except ContractViolation as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    return cli_dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
