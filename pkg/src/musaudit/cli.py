"""Command-line entry point.

Subcommands: synth, ingest, train, evaluate, audit, report.
Exit codes: 0 success, 2 validation failure, 3 I/O failure, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import audio_io, auditor, evaluation, synthworld
from .config import SCHEMA, config_hash, load_config, to_ini, train_config_kwargs
from .embeddings import (
    AGGREGATORS,
    AggregatedEmbedding,
    PairExample,
    aggregate,
    decode_maud,
    load_manifest,
    load_store_pairs,
    read_tensor_file,
    write_store,
)
from .errors import AuditError, NumericalError, ValidationError

log = logging.getLogger("musaudit")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
REFERENCE_AGGREGATION = "reference"


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _resolve(args) -> dict:
    overrides = {k: getattr(args, k, None) for k in SCHEMA}
    return load_config(args.config, overrides)


def _train_config(cfg) -> auditor.TrainConfig:
    return auditor.TrainConfig(**train_config_kwargs(cfg))


def _load_datasets(store_dirs):
    """Group pairs from one or more stores by generator; check they agree on encoder and shape."""
    datasets: dict = {}
    metas = []
    for d in store_dirs:
        meta, pairs = load_store_pairs(d)
        metas.append(meta)
        for p in pairs:
            datasets.setdefault(p.generator_id, []).append(p)
    shapes = {tuple(m["shape"]) for m in metas}
    encoders = {m["encoder_id"] for m in metas}
    if len(shapes) > 1:
        raise ValidationError(f"stores disagree on embedding shape: {sorted(shapes)}")
    if len(encoders) > 1:
        raise ValidationError(f"stores come from different encoders: {sorted(encoders)}; use one encoder per experiment")
    return datasets, metas


def _check_architecture(cfg, shape):
    wanted = cfg["architecture"]
    natural = auditor.architecture_for(shape)
    if wanted not in ("auto", natural):
        raise ValidationError(f"architecture {wanted!r} does not fit embeddings of shape {tuple(shape)} (needs {natural})")


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg) -> int:
    out = Path(args.out)
    shape = (cfg["map_layers"], cfg["dim"]) if cfg["map_layers"] > 0 else (cfg["dim"],)
    gap = None if cfg["alignment_gap"] < 0 else cfg["alignment_gap"]
    n_non = cfg["nonmember_pairs"] or cfg["pairs"]
    suite = synthworld.make_three_world_suite(
        cfg["seed"],
        alignment_gap=gap,
        member_noise=cfg["member_noise"],
        n_pairs_member=cfg["pairs"],
        n_pairs_nonmember=n_non,
        embedding_shape=shape,
        semantic_dim=cfg["semantic_dim"],
        content_scale=cfg["content_scale"],
        short_multiplier=cfg["short_multiplier"],
        offset_scale=cfg["offset_scale"],
    )
    chash = config_hash({k: cfg[k] for k in ("seed", "pairs", "nonmember_pairs", "alignment_gap", "member_noise",
                                             "dim", "map_layers", "semantic_dim", "content_scale", "short_multiplier", "offset_scale")})  # fmt: skip
    for spec in suite.specs:
        manifest, embeddings = suite.datasets[spec.generator_id]
        extra = {
            "seed": cfg["seed"],
            "config_hash": chash,
            "simulator": {
                "alignment_gap": spec.alignment_gap,
                "member_noise": spec.member_noise,
                "clip_regime": spec.clip_regime,
                "regime_multiplier": spec.regime_multiplier,
            },
        }
        write_store(out / spec.generator_id, manifest, embeddings, cfg["encoder_id"], "identity", extra)
        n_pairs = len(manifest) // 2
        print(f"{spec.generator_id}: {n_pairs} pairs ({cfg['pairs']} member, {n_non} non-member), regime {spec.clip_regime}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------


def _reference_embedding(path: Path, cfg) -> AggregatedEmbedding:
    clip = audio_io.resample_linear(audio_io.load_wav(path), cfg["sample_rate"])
    emb = audio_io.reference_encode(clip, cfg["n_bands"], cfg["n_frames"])
    return AggregatedEmbedding(emb.values, cfg["encoder_id"])


def cmd_ingest(args, cfg) -> int:
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    aggregation = cfg["aggregation"]
    if aggregation not in AGGREGATORS and aggregation != REFERENCE_AGGREGATION:
        raise ValidationError(f"unknown aggregation {aggregation!r}")
    tensor_dir = Path(args.tensor_dir) if args.tensor_dir else None
    embeddings = {}
    failures = []
    io_failure = False
    for r in manifest:
        try:
            if aggregation == REFERENCE_AGGREGATION:
                src = Path(r.source_path)
                src = src if src.is_absolute() else manifest_path.parent / src
                embeddings[r.item_id] = _reference_embedding(src, cfg)
            else:
                if tensor_dir is None:
                    raise ValidationError("--tensor-dir is required for tensor aggregations")
                raw = read_tensor_file(tensor_dir / f"{r.item_id}.maud")
                embeddings[r.item_id] = aggregate(raw, aggregation, cfg["encoder_id"])
        except OSError as exc:
            io_failure = True
            failures.append(f"{r.item_id}: {exc}")
        except AuditError as exc:
            failures.append(f"{r.item_id}: {exc}")
    if failures:
        print(f"ingest failed for {len(failures)} item(s):", file=sys.stderr)
        for f in failures:
            print(f"  {f}", file=sys.stderr)
        return EXIT_IO if io_failure else EXIT_VALIDATION
    shapes = {e.values.shape for e in embeddings.values()}
    if len(shapes) != 1:
        raise ValidationError(f"items aggregate to different shapes: {sorted(shapes)}")
    meta = write_store(args.out, manifest, embeddings, cfg["encoder_id"], aggregation, {"seed": cfg["seed"]})
    roles: dict = {}
    for r in manifest:
        roles[r.role] = roles.get(r.role, 0) + 1
    print(f"ingested {len(manifest)} items -> {meta['form']}{tuple(meta['shape'])}, content hash {meta['content_hash'][:16]}")
    for role in sorted(roles):
        print(f"  {role}: {roles[role]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args, cfg) -> int:
    datasets, metas = _load_datasets(args.stores)
    shape = tuple(metas[0]["shape"])
    _check_architecture(cfg, shape)
    tc = _train_config(cfg)
    chash = config_hash(cfg, [m["content_hash"] for m in metas])
    train_pairs, val_pairs = evaluation.shadow_pool(datasets, None, tc.seed)
    params, tlog = auditor.train(train_pairs, val_pairs, tc)
    out = Path(args.out)
    header = {
        "encoder_id": metas[0]["encoder_id"],
        "aggregation": metas[0]["aggregation"],
        "config": cfg,
        "config_hash": chash,
        "seed": tc.seed,
        "threshold": cfg["threshold"],
        "shadow_generators": sorted(datasets),
        "best_epoch": tlog.best_epoch,
        "best_val_loss": tlog.best_val_loss,
    }
    if metas[0]["aggregation"] == REFERENCE_AGGREGATION:
        header["reference"] = {k: cfg[k] for k in ("sample_rate", "n_bands", "n_frames")}
    auditor.save_checkpoint(out, params, header)
    _write(out / "training_log.csv", tlog.to_csv())
    print(f"trained {params.architecture} auditor on {len(train_pairs)} pairs (val {len(val_pairs)}); "
          f"best epoch {tlog.best_epoch}, val loss {tlog.best_val_loss:.4f}; checkpoint {out}")  # fmt: skip
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate / report
# ---------------------------------------------------------------------------


def cmd_evaluate(args, cfg) -> int:
    datasets, metas = _load_datasets(args.stores)
    _check_architecture(cfg, tuple(metas[0]["shape"]))
    tc = _train_config(cfg)
    protocol = cfg["protocol"]
    encoder_id = metas[0]["encoder_id"]
    chash = config_hash(cfg, [m["content_hash"] for m in metas])
    out = Path(args.out)
    seed = tc.seed
    if protocol == "loo":
        if len(datasets) < 3:
            raise ValidationError(f"leave-one-out needs three generators, stores hold {len(datasets)}")
        cells = evaluation.leave_one_out(datasets, tc, encoder_id, cfg["threshold"], cfg["jobs"])
        _write(out / "report.csv", evaluation.cells_to_csv(cells, chash, seed))
        _write(out / "report.md", evaluation.cells_to_markdown(cells, chash, seed, "Leave-one-generator-out"))
    elif protocol == "transfer":
        if len(datasets) < 2:
            raise ValidationError("transferability needs at least two generators")
        cells = evaluation.transferability_matrix(datasets, tc, encoder_id, cfg["threshold"], cfg["jobs"])
        _write(out / "report.csv", evaluation.cells_to_csv(cells, chash, seed))
        _write(out / "report.md", evaluation.cells_to_markdown(cells, chash, seed, "Transferability"))
        _write(out / "transfer_grid.csv", evaluation.transfer_grid_csv(cells))
    elif protocol == "ablation":
        target = cfg["target"] or sorted(datasets)[0]
        if target not in datasets:
            raise ValidationError(f"target {target!r} not among generators {sorted(datasets)}")
        pool = len(evaluation.shadow_pool(datasets, target, seed)[0])
        if max(cfg["sizes"]) > pool:
            raise ValidationError(f"ablation size {max(cfg['sizes'])} exceeds the pooled shadow training set ({pool})")
        curve = evaluation.ablation_curve(datasets, target, cfg["sizes"], cfg["k"], tc, encoder_id, cfg["threshold"], cfg["jobs"])
        _write(out / "ablation.csv", evaluation.ablation_to_csv(curve, chash, seed))
        _write(out / "ablation.md", evaluation.ablation_to_markdown(curve, chash, seed))
    else:
        raise ValidationError(f"unknown protocol {protocol!r}; choose loo, transfer or ablation")
    _write(out / "config.ini", to_ini(cfg))
    print(f"{protocol} report written to {out} (config hash {chash})")
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    src = Path(args.input)
    report = src / "report.csv"
    ablation = src / "ablation.csv"
    if report.is_file():
        with report.open(encoding="utf-8", newline="") as f:
            rows = list(csv.DictReader(f))
        cells = []
        for r in rows:
            counts = evaluation.ConfusionCounts(int(r["tp"]), int(r["fp"]), int(r["tn"]), int(r["fn"]))
            cells.append(
                evaluation.EvalCell(
                    r["protocol"], tuple(r["train_sources"].split("+")), r["test_target"], r["encoder_id"],
                    float(r["acc"]), None if r["fpr"] == evaluation.UNDEFINED else float(r["fpr"]),
                    None if r["fnr"] == evaluation.UNDEFINED else float(r["fnr"]), int(r["n_test"]), counts,
                    int(r["best_epoch"]),
                )
            )  # fmt: skip
        first = rows[0] if rows else {"config_hash": "", "seed": "0"}
        print(evaluation.cells_to_markdown(cells, first["config_hash"], int(first["seed"])), end="")
        return EXIT_OK
    if ablation.is_file():
        with ablation.open(encoding="utf-8", newline="") as f:
            rows = list(csv.DictReader(f))
        curve = evaluation.AblationCurve(rows[0]["target"], rows[0]["encoder_id"])
        for r in rows:
            accs = [float(a) for a in r["accs"].split(";")]
            curve.points.append(evaluation.AblationPoint(int(r["n"]), float(r["mean_acc"]), accs, r["seeds"].split(";")))
        print(evaluation.ablation_to_markdown(curve, rows[0]["config_hash"], int(rows[0]["seed"])), end="")
        return EXIT_OK
    raise FileNotFoundError(f"{src}: no report.csv or ablation.csv")


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------


def _audit_input(path: Path, params: auditor.AuditorParams, header: dict) -> np.ndarray:
    expected = tuple(params.embedding_shape)
    if path.suffix.lower() == ".wav":
        ref = header.get("reference")
        if ref is None:
            raise ValidationError(
                f"checkpoint was trained on {header.get('encoder_id')!r} embeddings; WAV input needs a reference-encoder checkpoint"
            )
        clip = audio_io.resample_linear(audio_io.load_wav(path), ref["sample_rate"])
        values = audio_io.reference_encode(clip, ref["n_bands"], ref["n_frames"]).values
    else:
        array, vocab = decode_maud(path.read_bytes(), str(path))
        if array.shape == expected and vocab is None:
            values = array.astype(np.float64)
        else:
            raw = read_tensor_file(path)
            values = aggregate(raw, header.get("aggregation", ""), header.get("encoder_id", "")).values
    if values.shape != expected:
        raise ValidationError(f"{path}: embedding shape {values.shape} does not match checkpoint input {expected}")
    return values


def cmd_audit(args, cfg) -> int:
    params, header = auditor.load_checkpoint(args.checkpoint)
    original = _audit_input(Path(args.original), params, header)
    generation = _audit_input(Path(args.generation), params, header)
    pair = PairExample(AggregatedEmbedding(original), AggregatedEmbedding(generation), 0, "audit", "target")
    threshold = args.threshold if args.threshold is not None else header.get("threshold", 0.5)
    s = auditor.score(params, pair)
    verdict = "member" if s >= threshold else "non-member"
    lines = [
        f"score: {s:.6f}",
        f"verdict: {verdict} (threshold {threshold})",
        f"checkpoint: {header['architecture']} auditor, encoder {header.get('encoder_id')}, "
        f"shadow generators {', '.join(header.get('shadow_generators', []))}, "
        f"config hash {header.get('config_hash')}, seed {header.get('seed')}",
    ]
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="musaudit", description="Black-box membership auditing for music generators.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI configuration file")
        for key in SCHEMA:
            p.add_argument(f"--{key}", default=None, metavar=key.upper())
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "write a three-generator synthetic suite")
    p.add_argument("--out", required=True)

    p = add("ingest", cmd_ingest, "aggregate encoder dumps (or WAV files) into a store")
    p.add_argument("--manifest", required=True)
    p.add_argument("--tensor-dir", dest="tensor_dir")
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train an auditor on pooled shadow stores")
    p.add_argument("--stores", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "run a protocol (loo, transfer, ablation)")
    p.add_argument("--stores", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = add("audit", cmd_audit, "score one (original, generation) pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--original", required=True)
    p.add_argument("--generation", required=True)
    p.set_defaults(threshold=None)

    p = add("report", cmd_report, "print the Markdown summary of an evaluation directory")
    p.add_argument("--in", dest="input", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _resolve(args)
        if args.command == "audit" and args.threshold is not None:
            args.threshold = float(args.threshold)
        return args.func(args, cfg)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, default=str), file=sys.stderr)
        return EXIT_NUMERIC
    except AuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
