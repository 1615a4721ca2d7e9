"""Command-line pipeline on a miniature configuration.

A module-scoped fixture drives the full default chain once (world, VT,
VA, curation, AT, evaluations) through cli_dispatch; the tests assert
exit codes, manifest records, report contents, and byte-level
reproducibility of re-run stages.
"""

import json

import pytest

from tripivot import config as cfgmod
from tripivot.cli import cli_dispatch, hash_path
from tripivot.errors import ContractViolation
from tripivot.evaluation import read_csv, write_csv
from tripivot.formats import load_json, read_embeddings

TINY_CFG = """\
# miniature pipeline: the whole chain runs in seconds
world.num_classes = 4
world.image_size = 16
world.audio_seconds = 0.32
world.sample_rate = 4000
world.mel_bins = 16
world.image_noise = 0.05
world.vt_train = 24
world.va_train = 24
world.at_gold = 24
world.eval_core = 16
world.eval_shifted = 8
world.eval_multi = 8
world.max_labels = 2

encoder.width = 32
encoder.layers = 1
encoder.heads = 2
encoder.out_dim = 16

vt.epochs = 2
vt.warmup_epochs = 1
vt.batch_size = 8
va.epochs = 2
va.warmup_epochs = 1
va.batch_size = 8
at.epochs = 1
at.warmup_epochs = 1
at.batch_size = 8

curate.pool_size = 64
"""


# ---- config plumbing ---------------------------------------------------


def test_defaults_load_without_file():
    cfg = cfgmod.load_config()
    assert cfg == cfgmod.DEFAULTS


def test_config_file_overrides_defaults(tmp_path):
    path = tmp_path / "t.cfg"
    path.write_text("world.num_classes = 7   # comment\n\n# blank above\n")
    cfg = cfgmod.load_config(path)
    assert cfg["world.num_classes"] == "7"
    assert cfg["world.image_size"] == cfgmod.DEFAULTS["world.image_size"]


def test_unknown_config_key_is_rejected_with_line(tmp_path):
    path = tmp_path / "t.cfg"
    path.write_text("world.num_classes = 4\nworld.flavor = mint\n")
    with pytest.raises(ContractViolation, match=r":2:.*world\.flavor"):
        cfgmod.load_config(path)


def test_config_line_without_equals_is_rejected(tmp_path):
    path = tmp_path / "t.cfg"
    path.write_text("world.num_classes 4\n")
    with pytest.raises(ContractViolation, match="key = value"):
        cfgmod.load_config(path)


def test_environment_overrides_file(tmp_path, monkeypatch):
    path = tmp_path / "t.cfg"
    path.write_text("world.num_classes = 7\n")
    monkeypatch.setenv("TRIPIVOT_WORLD_NUM_CLASSES", "9")
    assert cfgmod.load_config(path)["world.num_classes"] == "9"


def test_get_bool_rejects_nonsense():
    assert cfgmod.get_bool({"k": "Yes"}, "k") is True
    assert cfgmod.get_bool({"k": "0"}, "k") is False
    with pytest.raises(ContractViolation, match="boolean"):
        cfgmod.get_bool({"k": "maybe"}, "k")


def test_audio_input_shape_matches_frame_arithmetic():
    cfg = dict(cfgmod.DEFAULTS)
    cfg.update({"world.sample_rate": "4000", "world.audio_seconds": "0.32",
                "world.mel_bins": "16"})
    # 1280 samples, 100-sample window, 40-sample shift
    assert cfgmod.audio_input_shape(cfg) == (30, 16)


# ---- pipeline fixture --------------------------------------------------


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """Full default chain under one root; returns paths keyed by stage."""
    root = tmp_path_factory.mktemp("cli-chain")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    p = {
        "root": root, "cfg": cfg, "manifest": root / "manifest.json",
        "world": root / "world", "vt": root / "vt", "va": root / "va",
        "pairs": root / "pairs.jsonl", "at": root / "at",
    }

    def run(*argv):
        code = cli_dispatch([*argv, "--config", str(cfg),
                             "--manifest", str(p["manifest"])])
        assert code == 0
        return code

    run("gen-world", "--out", str(p["world"]))
    run("pretrain-vt", "--world", str(p["world"]), "--out", str(p["vt"]))
    run("pretrain-va", "--world", str(p["world"]), "--init", str(p["vt"]),
        "--out", str(p["va"]))
    run("curate", "--world", str(p["world"]), "--mode", "gold-label",
        "--out", str(p["pairs"]))
    run("finetune-at", "--world", str(p["world"]), "--init", str(p["va"]),
        "--pairs", str(p["pairs"]), "--out", str(p["at"]))
    p["run"] = run
    return p


# ---- exit codes --------------------------------------------------------


def test_missing_subcommand_is_a_usage_error():
    assert cli_dispatch([]) == 2


def test_unknown_subcommand_is_a_usage_error(tmp_path):
    assert cli_dispatch(["frobnicate", "--out", str(tmp_path / "x")]) == 2


def test_missing_out_is_a_usage_error():
    assert cli_dispatch(["gen-world"]) == 2


def test_help_exits_zero(capsys):
    assert cli_dispatch(["--help"]) == 0
    assert "gen-world" in capsys.readouterr().out


def test_jobs_below_one_is_a_contract_error(tmp_path, capsys):
    code = cli_dispatch(["gen-world", "--out", str(tmp_path / "w"),
                         "--manifest", str(tmp_path / "m.json"),
                         "--jobs", "0"])
    assert code == 1
    assert capsys.readouterr().err.startswith("error:")


def test_missing_world_is_a_contract_error(tmp_path, capsys):
    code = cli_dispatch(["pretrain-vt", "--out", str(tmp_path / "r"),
                         "--manifest", str(tmp_path / "m.json")])
    assert code == 1
    assert "--world" in capsys.readouterr().err


def test_bad_config_file_is_a_contract_error(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no.such.key = 1\n")
    code = cli_dispatch(["gen-world", "--out", str(tmp_path / "w"),
                         "--manifest", str(tmp_path / "m.json"),
                         "--config", str(bad)])
    assert code == 1
    assert "unknown config key" in capsys.readouterr().err


def test_failed_commands_append_no_manifest_record(tmp_path):
    manifest = tmp_path / "m.json"
    cli_dispatch(["pretrain-vt", "--out", str(tmp_path / "r"),
                  "--manifest", str(manifest)])
    assert not manifest.exists()


# ---- checkpoint hand-off diagnostics ------------------------------------


def test_finetune_without_init_names_the_missing_checkpoint(chain, tmp_path,
                                                            capsys):
    code = cli_dispatch(["finetune-at", "--world", str(chain["world"]),
                         "--pairs", str(chain["pairs"]),
                         "--out", str(tmp_path / "r"),
                         "--manifest", str(tmp_path / "m.json")])
    assert code == 1
    assert "missing VA checkpoint: pass --init" in capsys.readouterr().err


def test_finetune_from_audio_free_checkpoint_is_diagnosed(chain, tmp_path,
                                                          capsys):
    code = cli_dispatch(["finetune-at", "--world", str(chain["world"]),
                         "--init", str(chain["vt"]),
                         "--pairs", str(chain["pairs"]),
                         "--out", str(tmp_path / "r"),
                         "--manifest", str(tmp_path / "m.json")])
    assert code == 1
    assert "holds no audio tower" in capsys.readouterr().err


def test_init_from_nonexistent_run_is_diagnosed(chain, tmp_path, capsys):
    code = cli_dispatch(["pretrain-va", "--world", str(chain["world"]),
                         "--init", str(tmp_path / "nowhere"),
                         "--out", str(tmp_path / "r"),
                         "--manifest", str(tmp_path / "m.json"),
                         "--config", str(chain["cfg"])])
    assert code == 1
    assert "missing" in capsys.readouterr().err


def test_finetune_without_pairs_is_diagnosed(chain, tmp_path, capsys):
    code = cli_dispatch(["finetune-at", "--world", str(chain["world"]),
                         "--init", str(chain["va"]),
                         "--out", str(tmp_path / "r"),
                         "--manifest", str(tmp_path / "m.json"),
                         "--config", str(chain["cfg"])])
    assert code == 1
    assert "--pairs" in capsys.readouterr().err


def test_mined_curation_without_encoders_is_diagnosed(chain, tmp_path,
                                                      capsys):
    code = cli_dispatch(["curate", "--world", str(chain["world"]),
                         "--mode", "mined",
                         "--out", str(tmp_path / "p.jsonl"),
                         "--manifest", str(tmp_path / "m.json"),
                         "--config", str(chain["cfg"])])
    assert code == 1
    assert "--encoders" in capsys.readouterr().err


# ---- pipeline manifest --------------------------------------------------


def test_manifest_records_the_chain_in_order(chain):
    doc = load_json(chain["manifest"])
    commands = [r["command"] for r in doc["records"][:5]]
    assert commands == ["gen-world", "pretrain-vt", "pretrain-va",
                        "curate", "finetune-at"]


def test_manifest_records_hold_hashes_and_timing(chain):
    doc = load_json(chain["manifest"])
    rec = doc["records"][1]  # pretrain-vt
    assert set(rec) == {"command", "seed", "config_sha256", "inputs",
                        "outputs", "wall_time_s"}
    assert rec["inputs"]["world"] == hash_path(chain["world"])
    assert rec["outputs"]["run"] == hash_path(chain["vt"])
    assert rec["wall_time_s"] >= 0.0
    assert len(rec["config_sha256"]) == 64


def test_manifest_config_hash_is_stable_across_stages(chain):
    doc = load_json(chain["manifest"])
    hashes = {r["config_sha256"] for r in doc["records"][:5]}
    assert len(hashes) == 1


def test_gen_world_has_no_inputs(chain):
    rec = load_json(chain["manifest"])["records"][0]
    assert rec["inputs"] == {}
    assert rec["outputs"]["world"] == hash_path(chain["world"])


# ---- byte-level reproducibility -----------------------------------------


def test_gen_world_rerun_is_byte_identical(chain, tmp_path):
    chain["run"]("gen-world", "--out", str(tmp_path / "world2"))
    assert hash_path(tmp_path / "world2") == hash_path(chain["world"])


def test_pretrain_vt_rerun_is_byte_identical(chain, tmp_path):
    chain["run"]("pretrain-vt", "--world", str(chain["world"]),
                 "--out", str(tmp_path / "vt2"))
    assert hash_path(tmp_path / "vt2") == hash_path(chain["vt"])


def test_different_seed_changes_artifacts(chain, tmp_path):
    chain["run"]("gen-world", "--seed", "1", "--out", str(tmp_path / "w1"))
    assert hash_path(tmp_path / "w1") != hash_path(chain["world"])


def test_jobs_flag_never_changes_results(chain, tmp_path):
    out1 = tmp_path / "zs1"
    out2 = tmp_path / "zs2"
    chain["run"]("eval-zeroshot", "--world", str(chain["world"]),
                 "--encoders", str(chain["va"]), "--out", str(out1))
    chain["run"]("eval-zeroshot", "--world", str(chain["world"]),
                 "--encoders", str(chain["va"]), "--out", str(out2),
                 "--jobs", "4")
    assert (out1 / "report.json").read_bytes() == \
        (out2 / "report.json").read_bytes()


# ---- evaluation subcommands ---------------------------------------------


def test_eval_zeroshot_report_shape(chain, tmp_path):
    out = tmp_path / "zs"
    chain["run"]("eval-zeroshot", "--world", str(chain["world"]),
                 "--encoders", str(chain["at"]), "--out", str(out))
    doc = load_json(out / "report.json")
    assert doc["name"] == "zeroshot-core"
    assert doc["metrics"]["chance"] == 0.25
    assert 0.0 <= doc["metrics"]["accuracy"] <= 1.0
    assert doc["metrics"]["oracle_floor"] > doc["metrics"]["chance"]
    rows = read_csv(out / "report.per_class.csv")
    assert doc["tables"]["per_class"] == len(rows)
    for row in rows:
        assert set(row) == {"class", "accuracy", "count"}


def test_eval_retrieval_at_report_and_embeddings(chain, tmp_path):
    out = tmp_path / "ret"
    chain["run"]("eval-retrieval", "--world", str(chain["world"]),
                 "--encoders", str(chain["at"]), "--pair", "at",
                 "--out", str(out))
    doc = load_json(out / "report.json")
    assert {"a2t_r1", "a2t_r10", "t2a_r1", "t2a_r10"} <= set(doc["metrics"])
    ids, modalities, vectors = read_embeddings(out / "embeddings.bin")
    # 16 core clips plus 5 captions each
    assert len(ids) == 16 + 80
    assert modalities[:16] == ["audio"] * 16
    assert modalities[16:] == ["text"] * 80
    assert vectors.shape == (96, 16)


def test_eval_retrieval_shifted_split_runs(chain, tmp_path):
    out = tmp_path / "ret-shift"
    chain["run"]("eval-retrieval", "--world", str(chain["world"]),
                 "--encoders", str(chain["at"]), "--pair", "at",
                 "--split", "shifted", "--out", str(out))
    doc = load_json(out / "report.json")
    assert doc["name"] == "retrieval-at-shifted"
    assert all(0.0 <= v <= 1.0 for v in doc["metrics"].values())


def test_eval_map_reports_a_probability(chain, tmp_path):
    out = tmp_path / "map"
    chain["run"]("eval-map", "--world", str(chain["world"]),
                 "--encoders", str(chain["at"]), "--out", str(out))
    doc = load_json(out / "report.json")
    assert 0.0 <= doc["metrics"]["map"] <= 1.0
    assert doc["metrics"]["excluded_classes"] >= 0


def test_probe_pivotability_covers_every_core_clip(chain, tmp_path):
    out = tmp_path / "pivot"
    chain["run"]("probe-pivotability", "--world", str(chain["world"]),
                 "--encoders", str(chain["at"]), "--k", "3",
                 "--out", str(out))
    doc = load_json(out / "report.json")
    rows = read_csv(out / "report.per_audio.csv")
    assert doc["tables"]["per_audio"] == len(rows) == 16
    for row in rows:
        assert 0.0 <= float(row["value"]) <= 1.0
        assert int(row["pivotable"]) == int(float(row["value"]) >= 0.6)
        assert int(row["k"]) == 3
    assert 0.0 <= doc["metrics"]["pivotable_fraction"] <= 1.0


def test_vt_retrieval_is_bit_identical_across_later_stages(chain, tmp_path):
    """The pivot contract at the command level: image-text retrieval
    artifacts do not move by a single byte through VA and AT."""
    blobs = {}
    for stage in ("vt", "va", "at"):
        out = tmp_path / f"ret-{stage}"
        chain["run"]("eval-retrieval", "--world", str(chain["world"]),
                     "--encoders", str(chain[stage]), "--pair", "vt",
                     "--out", str(out))
        blobs[stage] = ((out / "report.json").read_bytes(),
                        (out / "embeddings.bin").read_bytes())
    assert blobs["vt"] == blobs["va"]
    assert blobs["vt"] == blobs["at"]


# ---- curation and scaling subcommands ------------------------------------


def test_curate_random_covers_the_gold_split(chain, tmp_path):
    out = tmp_path / "rand.jsonl"
    chain["run"]("curate", "--world", str(chain["world"]),
                 "--mode", "random", "--out", str(out))
    lines = [json.loads(s) for s in out.read_text().splitlines() if s]
    assert len(lines) == 24
    assert all(row["provenance"] == "random" for row in lines)


def test_curate_mined_scores_every_pair(chain, tmp_path):
    out = tmp_path / "mined.jsonl"
    chain["run"]("curate", "--world", str(chain["world"]),
                 "--mode", "mined", "--encoders", str(chain["vt"]),
                 "--out", str(out))
    lines = [json.loads(s) for s in out.read_text().splitlines() if s]
    assert len(lines) >= 24
    assert all(row["provenance"] == "mined" for row in lines)
    assert all(isinstance(row["score"], float) for row in lines)


def test_fit_scaling_recovers_an_exact_ladder(chain, tmp_path):
    ladder = tmp_path / "ladder.csv"
    write_csv(ladder, [{"pair_count": 2 ** e, "metric": 3.0 * e + 1.0}
                       for e in range(5, 10)])
    out = tmp_path / "fit"
    chain["run"]("fit-scaling", "--ladder", str(ladder),
                 "--target", "40.0", "--out", str(out))
    doc = load_json(out / "report.json")
    assert doc["metrics"]["slope"] == pytest.approx(3.0, abs=1e-9)
    assert doc["metrics"]["intercept"] == pytest.approx(1.0, abs=1e-9)
    assert doc["metrics"]["r_squared"] == pytest.approx(1.0, abs=1e-12)
    assert doc["metrics"]["extrapolated_count"] == pytest.approx(2.0 ** 13)
    assert doc["metrics"]["extrapolated"] is True
    assert doc["tables"]["rungs"] == len(read_csv(out / "report.rungs.csv")) == 5


def test_fit_scaling_requires_the_ladder_columns(chain, tmp_path, capsys):
    ladder = tmp_path / "ladder.csv"
    write_csv(ladder, [{"n": 32, "value": 1.0}])
    code = cli_dispatch(["fit-scaling", "--ladder", str(ladder),
                         "--out", str(tmp_path / "fit"),
                         "--manifest", str(tmp_path / "m.json")])
    assert code == 1
    assert "pair_count" in capsys.readouterr().err


def test_report_bundles_every_eval_under_a_directory(chain, tmp_path):
    for stage, sub in (("va", "e1"), ("at", "e2")):
        chain["run"]("eval-zeroshot", "--world", str(chain["world"]),
                     "--encoders", str(chain[stage]),
                     "--out", str(tmp_path / sub))
    out = tmp_path / "bundle"
    chain["run"]("report", "--inputs", str(tmp_path), "--out", str(out))
    rows = read_csv(out / "summary.csv")
    # two reports, three metrics apiece
    assert len(rows) == 6
    assert {r["metric"] for r in rows} == {"accuracy", "chance",
                                           "oracle_floor"}
    index = load_json(out / "index.json")
    assert len(index["reports"]) == 2
    for entry in index["reports"]:
        assert len(entry["sha256"]) == 64
