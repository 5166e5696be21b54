"""Command-line entry point: ``neurovol <command> [options]``.

Exit codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    accuracy,
    confusion_stats,
    fisher_score_per_dim,
    latent_traversal,
    lda_classify,
    lda_fit,
    lda_project,
    metadata_bias_report,
    precision_recall,
    projections_csv,
)
from .config import MODEL_KINDS, ExperimentConfig
from .io import VolumeFormatError, atomic_write_bytes, read_volume, write_slices, write_volume
from .models import (
    CheckpointError,
    VAEModel,
    encode_means,
    load_checkpoint,
    load_into,
    reconstruct,
    sample_prior,
    train_ivae,
    train_vae,
    write_loss_csv,
)
from .models.checkpoint import encode_checkpoint, checkpoint_from_model
from .phantom import CLASSES, DatasetManifest, generate_dataset
from .preprocess import preprocess_volume
from .tensor import RngStream
from .tensor.rng import mix_seed

log = logging.getLogger("neurovol")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2
MANIFEST = "manifest.jsonl"


class OutputExists(ValueError):
    pass


# ---------------------------------------------------------------- helpers

def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise OutputExists(f"output directory {path} is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _run_record(out: Path, cfg: ExperimentConfig, command: str, **extra) -> None:
    """Sidecar tying every artifact in ``out`` to the experiment digest."""
    _write_json(out / "run.json", {"command": command, "experiment_digest": cfg.digest(), **extra})


def _slice_comment(cfg: ExperimentConfig) -> str:
    return f"neurovol experiment {cfg.digest()}"


def _load_manifest(data_dir: Path) -> DatasetManifest:
    path = data_dir / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    return DatasetManifest.read(path)


def _load_stack(data_dir: Path, records) -> np.ndarray:
    return np.stack([read_volume(data_dir / "volumes" / f"{r.image_id}.v3f") for r in records])


def _load_model(cfg: ExperimentConfig, checkpoint: str | None, kind: str | None) -> tuple[VAEModel, str]:
    if not checkpoint:
        raise ValueError("--checkpoint is required for this command")
    ckpt = load_checkpoint(checkpoint)
    kind = kind or ckpt.extra.get("model_kind", "vae")
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    expected = cfg.arch_for(kind)
    if expected.digest() != ckpt.architecture.digest():
        raise CheckpointError(
            f"checkpoint architecture {ckpt.architecture.digest()} does not match the configured "
            f"{kind} architecture {expected.digest()}")
    return load_into(VAEModel(expected), ckpt), kind


def _data_dir(args, cfg) -> Path:
    return Path(args.data or cfg.data_dir)


# ---------------------------------------------------------------- commands

def cmd_generate(args, cfg: ExperimentConfig) -> int:
    out = _prepare_out(Path(args.out or cfg.data_dir), args.force)
    pcfg = cfg.phantom_config()
    n = args.n or cfg.n_patients
    manifest, _ = generate_dataset(pcfg, n, cfg.seed, out_dir=out, train_fraction=cfg.train_fraction)
    manifest.write(out / MANIFEST, {"experiment_digest": cfg.digest()})
    atomic_write_bytes(out / "experiment.json", cfg.to_json().encode())
    _run_record(out, cfg, "generate", n_patients=n, n_images=len(manifest))
    print(f"generated {len(manifest)} images from {n} patients in {out}")
    return EXIT_OK


def cmd_preprocess(args, cfg: ExperimentConfig) -> int:
    src = _data_dir(args, cfg)
    manifest = _load_manifest(src)
    out = _prepare_out(Path(args.out or f"{src}_processed"), args.force)
    (out / "volumes").mkdir()
    p = cfg.preprocess
    trim = tuple(p["trim"]) if p.get("trim") else None
    lines, failed = [], 0
    for rec in manifest:
        entry = {"image_id": rec.image_id, "experiment_digest": cfg.digest()}
        try:
            vol = read_volume(src / "volumes" / f"{rec.image_id}.v3f")
            proc, report = preprocess_volume(vol, trim, int(p.get("block", 4)), float(p.get("q", 99.5)))
            write_volume(out / "volumes" / f"{rec.image_id}.v3f", proc)
            report.image_id = rec.image_id
            entry.update(report.to_dict(), ok=True, shape=list(proc.shape))
        except (OSError, ValueError) as exc:
            failed += 1
            entry.update(ok=False, error=str(exc))
            log.error("preprocess %s: %s", rec.image_id, exc)
        lines.append(json.dumps(entry, sort_keys=True))
    atomic_write_bytes(out / "preprocess_report.jsonl", ("\n".join(lines) + "\n").encode())
    manifest.write(out / MANIFEST, {"experiment_digest": cfg.digest()})
    _run_record(out, cfg, "preprocess", source=str(src), failed=failed)
    print(f"preprocessed {len(lines) - failed}/{len(lines)} volumes into {out}")
    return EXIT_IO if failed else EXIT_OK


def cmd_train(args, cfg: ExperimentConfig) -> int:
    kind = args.model
    data = _data_dir(args, cfg)
    manifest = _load_manifest(data)
    train = manifest.select("train")
    if not train:
        raise ValueError(f"no split=train records in {data / MANIFEST}")
    x = _load_stack(data, train)
    arch, tcfg = cfg.arch_for(kind), cfg.train_for(kind)
    if tuple(x.shape[1:]) != arch.input_shape:
        raise ValueError(f"volumes are {x.shape[1:]} but the architecture expects {arch.input_shape}")
    out = _prepare_out(Path(args.out or Path(cfg.out_dir) / kind), args.force)
    trainer = train_vae if kind == "vae" else train_ivae
    ids = [r.image_id for r in train]
    result = trainer(x, arch, tcfg, image_ids=ids, out_dir=out / "checkpoints",
                     checkpoint_extra={"experiment_digest": cfg.digest()})
    final = checkpoint_from_model(result.model, tcfg.epochs, tcfg.digest(), model_kind=kind,
                                  experiment_digest=cfg.digest())
    atomic_write_bytes(out / "model.ckpt", encode_checkpoint(final))
    write_loss_csv(out / "loss.csv", result, ivae=kind == "ivae")
    log_lines = [json.dumps({"batch": i, "image_ids": b}) for i, b in enumerate(result.batch_log)]
    atomic_write_bytes(out / "batch_log.jsonl", ("\n".join(log_lines) + "\n").encode())
    first, last = result.history[0], result.history[-1]
    _run_record(out, cfg, "train", model=kind, train_config_digest=tcfg.digest(),
                architecture_digest=arch.digest(), n_train=len(train),
                recon_first=first["loss_recon"], recon_last=last["loss_recon"])
    print(f"trained {kind} for {tcfg.epochs} epochs on {len(train)} images; "
          f"recon {first['loss_recon']:.5f} -> {last['loss_recon']:.5f}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_reconstruct(args, cfg: ExperimentConfig) -> int:
    model, kind = _load_model(cfg, args.checkpoint, args.model)
    data = _data_dir(args, cfg)
    records = _load_manifest(data).select(args.split)
    if args.n:
        records = records[:args.n]
    if not records:
        raise ValueError(f"no split={args.split} records to reconstruct")
    x = _load_stack(data, records)
    out = _prepare_out(Path(args.out or Path(cfg.out_dir) / f"{kind}_reconstruct"), args.force)
    recon = reconstruct(x, model, use_mean=True)
    for rec, vol in zip(records, recon):
        write_volume(out / f"{rec.image_id}_recon.v3f", vol)
        write_slices(vol, out / f"{rec.image_id}_recon", _slice_comment(cfg))
    mse = float(np.mean((recon - x) ** 2))
    _run_record(out, cfg, "reconstruct", model=kind, n=len(records), mse=mse)
    print(f"reconstructed {len(records)} volumes into {out} (mse {mse:.5f})")
    return EXIT_OK


def cmd_sample(args, cfg: ExperimentConfig) -> int:
    model, kind = _load_model(cfg, args.checkpoint, args.model)
    n = args.n or 5
    out = _prepare_out(Path(args.out or Path(cfg.out_dir) / f"{kind}_samples"), args.force)
    vols = sample_prior(model, n, RngStream(mix_seed(cfg.seed, 0x5A11)))
    for i, vol in enumerate(vols):
        write_volume(out / f"sample_{i:03d}.v3f", vol)
        write_slices(vol, out / f"sample_{i:03d}", _slice_comment(cfg))
    _run_record(out, cfg, "sample", model=kind, n=n)
    print(f"sampled {n} volumes into {out}")
    return EXIT_OK


def _write_traversals(model, dims, values, out: Path, cfg: ExperimentConfig) -> list[str]:
    names = []
    for d in dims:
        for i, vol in enumerate(latent_traversal(model, int(d), values)):
            stem = f"dim{int(d):03d}_{i}"
            write_volume(out / f"{stem}.v3f", vol)
            write_slices(vol, out / stem, _slice_comment(cfg))
            names.append(stem)
    return names


def _fit_classes(labels, order=CLASSES) -> list[str]:
    """Classes with at least two training images; the rest cannot enter the LDA."""
    counts = {c: labels.count(c) for c in order}
    small = [c for c, k in counts.items() if k == 1]
    if small:
        log.warning("classes %s have a single training image and are left out of the LDA", small)
    return [c for c, k in counts.items() if k >= 2]


def cmd_analyze(args, cfg: ExperimentConfig) -> int:
    model, kind = _load_model(cfg, args.checkpoint, args.model)
    data = _data_dir(args, cfg)
    manifest = _load_manifest(data)
    train, test = manifest.select("train"), manifest.select("test")
    if not train or not test:
        raise ValueError("analysis needs both train and test records")
    out = _prepare_out(Path(args.out or Path(cfg.out_dir) / f"{kind}_analysis"), args.force)
    mu_tr = encode_means(_load_stack(data, train), model)
    mu_te = encode_means(_load_stack(data, test), model)
    y_tr = [r.class_label for r in train]
    y_te = [r.class_label for r in test]
    reg = cfg.analysis_value("reg")
    classes = _fit_classes(y_tr)
    fit = [i for i, c in enumerate(y_tr) if c in classes]
    lda = lda_fit(mu_tr[fit], [y_tr[i] for i in fit], classes, reg)
    pred = lda_classify(lda, mu_te)
    keep = [i for i, a in enumerate(y_te) if a in classes]
    stats = confusion_stats([pred[i] for i in keep], [y_te[i] for i in keep], classes)
    ms_pred = [p == "ms" for p in pred]
    ms_true = [a == "ms" for a in y_te]

    # projections for display; optionally with the leuk grades merged
    if cfg.analysis_value("merge_leuk"):
        def merge(labels):
            return ["leuk" if str(c).startswith("leuk") else c for c in labels]
        lab_tr, lab_te = merge(y_tr), merge(y_te)
        merged = _fit_classes(lab_tr, ("ms", "leuk", "healthy"))
        pfit = [i for i, c in enumerate(lab_tr) if c in merged]
        plda = lda_fit(mu_tr[pfit], [lab_tr[i] for i in pfit], merged, reg)
    else:
        plda, lab_tr, lab_te = lda, y_tr, y_te
    for name, recs, mu, labs in (("train", train, mu_tr, lab_tr), ("test", test, mu_te, lab_te)):
        text = projections_csv([r.image_id for r in recs], labs, lda_project(plda, mu))
        atomic_write_bytes(out / f"projections_{name}.csv", text.encode())

    fisher = fisher_score_per_dim(mu_tr, y_tr)
    top_k = int(cfg.analysis_value("top_k"))
    top = [int(d) for d in np.argsort(-fisher, kind="stable")[:top_k]]
    tdir = out / "traversal"
    tdir.mkdir()
    values = [float(v) for v in cfg.analysis_value("traversal_values")]
    trav = _write_traversals(model, top, values, tdir, cfg)

    metrics = {
        "experiment_digest": cfg.digest(),
        "model": kind,
        "classes": classes,
        "per_class": stats.to_dict(),
        "accuracy": accuracy([pred[i] for i in keep], [y_te[i] for i in keep]),
        "ms_vs_rest_accuracy": accuracy(ms_pred, ms_true),
        "lda_eigenvalues": lda.eigenvalues.tolist(),
        "lda_reg": lda.reg,
        "fisher_scores": [float(v) if np.isfinite(v) else None for v in fisher],
        "top_dims": top,
        "traversal_values": values,
        "traversal_files": trav,
        "predictions": [{"image_id": r.image_id, "actual": a, "predicted": p}
                        for r, a, p in zip(test, y_te, pred)],
    }
    _write_json(out / "metrics.json", metrics)
    bias = metadata_bias_report(list(manifest), gap_sd=float(cfg.analysis_value("gap_sd")))
    bias["experiment_digest"] = cfg.digest()
    _write_json(out / "bias_report.json", bias)
    _run_record(out, cfg, "analyze", model=kind)
    pr = precision_recall(stats)
    print(f"analyzed {len(test)} test images: accuracy {metrics['accuracy']:.3f}, "
          f"ms-vs-rest {metrics['ms_vs_rest_accuracy']:.3f}")
    for c in classes:
        p, r = pr[c]
        fmt = lambda v: "undef" if v is None else f"{v:.2f}"  # noqa: E731
        print(f"  {c:8s} precision {fmt(p)} recall {fmt(r)}")
    return EXIT_OK


def cmd_traverse(args, cfg: ExperimentConfig) -> int:
    model, kind = _load_model(cfg, args.checkpoint, args.model)
    if args.dim is not None:
        dims = args.dim
    else:
        data = _data_dir(args, cfg)
        train = _load_manifest(data).select("train")
        mu = encode_means(_load_stack(data, train), model)
        fisher = fisher_score_per_dim(mu, [r.class_label for r in train])
        dims = [int(d) for d in np.argsort(-fisher, kind="stable")[:int(cfg.analysis_value("top_k"))]]
    out = _prepare_out(Path(args.out or Path(cfg.out_dir) / f"{kind}_traverse"), args.force)
    values = [float(v) for v in cfg.analysis_value("traversal_values")]
    names = _write_traversals(model, dims, values, out, cfg)
    _run_record(out, cfg, "traverse", model=kind, dims=[int(d) for d in dims], values=values)
    print(f"wrote {len(names)} traversal volumes for dims {list(dims)} into {out}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "sample": cmd_sample,
    "analyze": cmd_analyze,
    "traverse": cmd_traverse,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neurovol", description="Phantom MRI volumes, 3-D VAE/IVAE training "
                                     "and latent-space analysis.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMANDS[name].__name__.replace("cmd_", ""))
        p.add_argument("--config", help="experiment config (JSON); defaults are used when omitted")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        p.add_argument("--data", help="dataset directory (default: data_dir from the config)")
        p.add_argument("--model", choices=MODEL_KINDS, default=None if name not in ("train",) else "vae")
        p.add_argument("--checkpoint", help="model checkpoint")
        p.add_argument("--n", type=int, help="patients (generate), volumes (sample) or inputs (reconstruct)")
        p.add_argument("--split", choices=("train", "test"), default="test", help="records to reconstruct")
        p.add_argument("--dim", type=int, nargs="+", help="latent dimensions to traverse")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        cfg = cfg.with_overrides(seed=args.seed)
        return COMMANDS[args.command](args, cfg)
    except (OSError, VolumeFormatError) as exc:
        print(f"neurovol {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"neurovol {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
