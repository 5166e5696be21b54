import json

import numpy as np
import pytest

from neurovol.analysis import accuracy, confusion_stats
from neurovol.cli import EXIT_IO, EXIT_OK, EXIT_VALIDATION, main
from neurovol.config import ExperimentConfig
from neurovol.io import decode_pgm, encode_volume, read_volume, write_volume
from neurovol.models import load_checkpoint
from neurovol.phantom import DatasetManifest

TINY = {
    "n_patients": 12,
    "seed": 5,
    "train": {"epochs": 2, "batch_size": 4},
    "architecture": {"channels": [2, 4], "dense": [8]},
    "models": {"vae": {"latent_dim": 3, "beta": 1e-3}, "ivae": {"latent_dim": 4, "beta": 1e-3, "margin": 2.0}},
}


def write_config(tmp_path, **over):
    d = json.loads(json.dumps(TINY))
    d.update(data_dir=str(tmp_path / "data"), out_dir=str(tmp_path / "runs"))
    d.update(over)
    path = tmp_path / "config.json"
    path.write_text(ExperimentConfig.from_dict(d).to_json())
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """generate -> train (vae) shared by the read-only tests below."""
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp)
    assert main(["generate", "--config", cfg]) == EXIT_OK
    assert main(["train", "--config", cfg, "--model", "vae"]) == EXIT_OK
    return tmp, cfg


def digest_of(cfg_path):
    return ExperimentConfig.load(cfg_path).digest()


# ---------------------------------------------------------------- config

def test_config_round_trip_and_digest():
    cfg = ExperimentConfig.from_dict(TINY)
    back = ExperimentConfig.from_json(cfg.to_json())
    assert back.to_dict() == cfg.to_dict()
    assert back.digest() == cfg.digest()
    assert cfg.with_overrides(seed=6).digest() != cfg.digest()
    assert len(cfg.digest()) == 64


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown config keys"):
        ExperimentConfig.from_dict({"colour": 1})
    with pytest.raises(ValueError, match="unknown keys"):
        ExperimentConfig.from_dict({"train": {"speed": 2}})
    with pytest.raises(ValueError):
        ExperimentConfig.from_json("[1, 2]")


def test_config_per_model_sections():
    cfg = ExperimentConfig.from_dict(TINY)
    assert cfg.arch_for("vae").latent_dim == 3
    assert cfg.arch_for("ivae").latent_dim == 4
    assert cfg.train_for("ivae").margin == 2.0
    assert cfg.train_for("vae").seed == cfg.seed == cfg.train_for("ivae").seed


def test_bad_config_file_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["generate", "--config", str(bad)]) == EXIT_VALIDATION
    assert main(["generate", "--config", str(tmp_path / "missing.json")]) == EXIT_IO


# ---------------------------------------------------------------- generate

def test_generate_writes_dataset_with_digest(pipeline):
    tmp, cfg = pipeline
    data = tmp / "data"
    manifest = DatasetManifest.read(data / "manifest.jsonl")
    assert len({r.patient_id for r in manifest}) == 12
    for r in manifest:
        assert read_volume(data / "volumes" / f"{r.image_id}.v3f").shape == (20, 24, 20)
    meta = json.loads((data / "manifest.meta.json").read_text())
    assert meta["experiment_digest"] == digest_of(cfg)
    assert json.loads((data / "run.json").read_text())["experiment_digest"] == digest_of(cfg)
    assert ExperimentConfig.load(data / "experiment.json").digest() == digest_of(cfg)


def test_generate_refuses_collision_then_force(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["generate", "--config", cfg]) == EXIT_OK
    first = (tmp_path / "data" / "manifest.jsonl").read_bytes()
    assert main(["generate", "--config", cfg]) == EXIT_VALIDATION
    assert main(["generate", "--config", cfg, "--force"]) == EXIT_OK
    assert (tmp_path / "data" / "manifest.jsonl").read_bytes() == first


def test_generate_seed_override_changes_data(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "99"]) == EXIT_OK
    a = (tmp_path / "a" / "manifest.jsonl").read_bytes()
    b = (tmp_path / "b" / "manifest.jsonl").read_bytes()
    assert a != b
    meta_b = json.loads((tmp_path / "b" / "manifest.meta.json").read_text())
    assert meta_b["seed"] == 99


def test_generate_default_proportions_100(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["generate", "--config", cfg, "--n", "100"]) == EXIT_OK
    manifest = DatasetManifest.read(tmp_path / "data" / "manifest.jsonl")
    per_class = {}
    for r in manifest:
        per_class.setdefault(r.class_label, set()).add(r.patient_id)
    counts = {c: len(p) for c, p in per_class.items()}
    # largest-remainder rounding of the default proportions
    assert counts == {"healthy": 60, "ms": 20, "leuk1": 12, "leuk2": 1, "leuk3": 7}


# ---------------------------------------------------------------- preprocess

@pytest.mark.slow
def test_preprocess_raw_volumes_with_corrupt_file(tmp_path):
    cfg = write_config(tmp_path, raw=True)
    assert main(["generate", "--config", cfg, "--n", "5"]) == EXIT_OK
    data = tmp_path / "data"
    manifest = DatasetManifest.read(data / "manifest.jsonl")
    ids = [r.image_id for r in manifest]
    assert read_volume(data / "volumes" / f"{ids[0]}.v3f").shape == (182, 218, 182)
    bad = data / "volumes" / f"{ids[-1]}.v3f"
    bad.write_bytes(b"NOPE" + bad.read_bytes()[4:])

    out = tmp_path / "proc"
    assert main(["preprocess", "--config", cfg, "--out", str(out)]) == EXIT_IO
    lines = [json.loads(s) for s in (out / "preprocess_report.jsonl").read_text().splitlines()]
    assert len(lines) == len(ids)
    assert [e["image_id"] for e in lines] == ids
    assert not lines[-1]["ok"] and "magic" in lines[-1]["error"]
    for e in lines[:-1]:
        assert e["ok"] and e["shape"] == [40, 48, 40]
        v = read_volume(out / "volumes" / f"{e['image_id']}.v3f")
        assert v.shape == (40, 48, 40)
        assert v.min() >= 0.0 and v.max() <= 1.0
    assert all(e["experiment_digest"] == digest_of(cfg) for e in lines)


def test_preprocess_small_volumes(tmp_path):
    # non-raw data with a trim that fits, to exercise the command quickly
    cfg = write_config(tmp_path, n_patients=5, preprocess={"trim": [16, 24, 16], "block": 4, "q": 99.5})
    assert main(["generate", "--config", cfg]) == EXIT_OK
    out = tmp_path / "proc"
    assert main(["preprocess", "--config", cfg, "--out", str(out)]) == EXIT_OK
    lines = (out / "preprocess_report.jsonl").read_text().splitlines()
    n = len(DatasetManifest.read(tmp_path / "data" / "manifest.jsonl"))
    assert len(lines) == n
    assert all(json.loads(s)["shape"] == [4, 6, 4] for s in lines)


def test_preprocess_missing_manifest_is_io_error(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["preprocess", "--config", cfg, "--data", str(tmp_path / "nowhere")]) == EXIT_IO


# ---------------------------------------------------------------- train

def test_train_outputs(pipeline):
    tmp, cfg = pipeline
    run = tmp / "runs" / "vae"
    rows = (run / "loss.csv").read_text().splitlines()
    assert len(rows) == 1 + 2  # header + one row per epoch
    ckpt = load_checkpoint(run / "model.ckpt")
    assert ckpt.extra["model_kind"] == "vae"
    assert ckpt.extra["experiment_digest"] == digest_of(cfg)
    assert json.loads((run / "run.json").read_text())["experiment_digest"] == digest_of(cfg)


def test_train_uses_only_train_split(pipeline):
    tmp, _ = pipeline
    manifest = DatasetManifest.read(tmp / "data" / "manifest.jsonl")
    test_ids = {r.image_id for r in manifest.select("test")}
    train_ids = {r.image_id for r in manifest.select("train")}
    assert test_ids
    seen = set()
    for line in (tmp / "runs" / "vae" / "batch_log.jsonl").read_text().splitlines():
        seen.update(json.loads(line)["image_ids"])
    assert seen == train_ids
    assert not seen & test_ids


def test_train_is_deterministic(pipeline, tmp_path):
    tmp, cfg = pipeline
    other = tmp_path / "again"
    assert main(["train", "--config", cfg, "--model", "vae", "--out", str(other)]) == EXIT_OK
    first = tmp / "runs" / "vae"
    assert (other / "model.ckpt").read_bytes() == (first / "model.ckpt").read_bytes()
    assert (other / "loss.csv").read_bytes() == (first / "loss.csv").read_bytes()


def test_train_empty_split_rejected(tmp_path, pipeline):
    src, cfg = pipeline
    manifest = DatasetManifest.read(src / "data" / "manifest.jsonl")
    data = tmp_path / "only_test"
    (data / "volumes").mkdir(parents=True)
    lines = []
    for r in manifest.select("test"):
        lines.append(r.to_json())
        write_volume(data / "volumes" / f"{r.image_id}.v3f",
                     read_volume(src / "data" / "volumes" / f"{r.image_id}.v3f"))
    (data / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    assert main(["train", "--config", cfg, "--data", str(data), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION


def test_train_ivae(pipeline, tmp_path):
    _, cfg = pipeline
    out = tmp_path / "ivae"
    assert main(["train", "--config", cfg, "--model", "ivae", "--out", str(out)]) == EXIT_OK
    header = (out / "loss.csv").read_text().splitlines()[0]
    assert "e_fake" in header
    assert load_checkpoint(out / "model.ckpt").extra["model_kind"] == "ivae"


# ---------------------------------------------------------------- reconstruct / sample

def test_sample_five_volumes_fifteen_pgms(pipeline, tmp_path):
    tmp, cfg = pipeline
    out = tmp_path / "s"
    ck = str(tmp / "runs" / "vae" / "model.ckpt")
    assert main(["sample", "--config", cfg, "--checkpoint", ck, "--n", "5", "--out", str(out)]) == EXIT_OK
    assert len(list(out.glob("*.v3f"))) == 5
    pgms = sorted(out.glob("*.pgm"))
    assert len(pgms) == 15
    dims = {"axial": (20, 24), "coronal": (20, 20), "sagittal": (24, 20)}
    for p in pgms:
        blob = p.read_bytes()
        assert f"# neurovol experiment {digest_of(cfg)}".encode() in blob
        plane = p.stem.rsplit("_", 1)[1]
        assert decode_pgm(blob).shape == dims[plane]


def test_reconstruct_deterministic(pipeline, tmp_path):
    tmp, cfg = pipeline
    ck = str(tmp / "runs" / "vae" / "model.ckpt")
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main(["reconstruct", "--config", cfg, "--checkpoint", ck, "--n", "2", "--out", str(out)]) == EXIT_OK
        outs.append(out)
    files = sorted(p.name for p in outs[0].iterdir() if p.suffix in (".v3f", ".pgm"))
    assert len(files) == 2 * 4
    for name in files:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_checkpoint_architecture_mismatch_reports_both_digests(pipeline, tmp_path, capsys):
    tmp, _ = pipeline
    cfg = write_config(tmp_path, architecture={"channels": [2, 4], "dense": [16]})
    ck = str(tmp / "runs" / "vae" / "model.ckpt")
    code = main(["sample", "--config", cfg, "--checkpoint", ck, "--out", str(tmp_path / "s")])
    assert code == EXIT_VALIDATION
    err = capsys.readouterr().err
    expected = ExperimentConfig.load(cfg).arch_for("vae").digest()
    actual = load_checkpoint(ck).architecture.digest()
    assert expected in err and actual in err


def test_corrupt_checkpoint_rejected(pipeline, tmp_path):
    _, cfg = pipeline
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert main(["sample", "--config", cfg, "--checkpoint", str(bad), "--out", str(tmp_path / "s")]) == EXIT_VALIDATION


# ---------------------------------------------------------------- analyze / traverse

@pytest.fixture(scope="module")
def analysis(pipeline):
    tmp, cfg = pipeline
    out = tmp / "analysis"
    ck = str(tmp / "runs" / "vae" / "model.ckpt")
    assert main(["analyze", "--config", cfg, "--checkpoint", ck, "--out", str(out)]) == EXIT_OK
    return out, cfg


def test_metrics_recomputed_from_predictions(analysis):
    out, _ = analysis
    m = json.loads((out / "metrics.json").read_text())
    preds = m["predictions"]
    keep = [p for p in preds if p["actual"] in m["classes"]]
    stats = confusion_stats([p["predicted"] for p in keep], [p["actual"] for p in keep], m["classes"])
    assert stats.to_dict() == m["per_class"]
    assert accuracy([p["predicted"] for p in keep], [p["actual"] for p in keep]) == m["accuracy"]
    ms = accuracy([p["predicted"] == "ms" for p in preds], [p["actual"] == "ms" for p in preds])
    assert ms == m["ms_vs_rest_accuracy"]


def test_analysis_artifacts_share_digest(analysis):
    out, cfg = analysis
    d = digest_of(cfg)
    assert json.loads((out / "metrics.json").read_text())["experiment_digest"] == d
    assert json.loads((out / "bias_report.json").read_text())["experiment_digest"] == d
    assert json.loads((out / "run.json").read_text())["experiment_digest"] == d
    for p in (out / "traversal").glob("*.pgm"):
        assert f"neurovol experiment {d}".encode() in p.read_bytes()


def test_analysis_traversal_and_projections(analysis):
    out, cfg = analysis
    m = json.loads((out / "metrics.json").read_text())
    assert len(m["top_dims"]) == 2
    fisher = np.array([np.inf if v is None else v for v in m["fisher_scores"]])
    assert fisher[m["top_dims"][0]] == fisher.max()
    assert len(list((out / "traversal").glob("*.v3f"))) == 2 * 3
    header = (out / "projections_test.csv").read_text().splitlines()[0].split(",")
    n_classes = len(m["classes"])
    assert len([h for h in header if h.startswith("ld")]) <= min(3, n_classes - 1)


def test_analysis_merged_classes_at_most_three_columns(pipeline, tmp_path):
    tmp, _ = pipeline
    cfg = write_config(tmp_path, data_dir=str(tmp / "data"),
                       analysis={"merge_leuk": True, "top_k": 1, "traversal_values": [0.0]})
    ck = str(tmp / "runs" / "vae" / "model.ckpt")
    out = tmp_path / "a"
    assert main(["analyze", "--config", cfg, "--checkpoint", ck, "--out", str(out)]) == EXIT_OK
    rows = [line.split(",") for line in (out / "projections_train.csv").read_text().splitlines()]
    coords = [h for h in rows[0] if h.startswith("ld")]
    labels = {r[1] for r in rows[1:]}
    assert labels <= {"ms", "leuk", "healthy"}
    assert len(coords) <= 2


def test_traverse_explicit_dims(pipeline, tmp_path):
    tmp, cfg = pipeline
    ck = str(tmp / "runs" / "vae" / "model.ckpt")
    out = tmp_path / "t"
    assert main(["traverse", "--config", cfg, "--checkpoint", ck, "--dim", "0", "2", "--out", str(out)]) == EXIT_OK
    names = sorted(p.name for p in out.glob("*.v3f"))
    assert names == [f"dim{d:03d}_{i}.v3f" for d in (0, 2) for i in range(3)]
    # the middle traversal value is 0, i.e. the decoded prior mean, identical for both dims
    assert (out / "dim000_1.v3f").read_bytes() == (out / "dim002_1.v3f").read_bytes()


def test_volume_file_round_trip_via_cli_output(pipeline):
    tmp, _ = pipeline
    path = next((tmp / "data" / "volumes").glob("*.v3f"))
    blob = path.read_bytes()
    assert encode_volume(read_volume(path)) == blob
