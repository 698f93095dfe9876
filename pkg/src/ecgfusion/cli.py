"""Command-line entry point wiring the modules into reproducible runs.

Configuration is a flat key-value text file (``key = value`` per line,
``#`` comments) overridable with repeated ``--set key=value`` flags.
Every run directory receives a manifest (resolved config, its hash,
seed, library versions) sufficient to replay the run bit-identically;
nothing time-dependent is ever written.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric error,
5 leakage assertion, 1 anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, asdict, fields
from pathlib import Path

import numpy as np
import scipy
import torch

from . import __version__
from .audit import FitAudit
from .backbone import EcgBackbone, load_checkpoint, save_checkpoint, saliency
from .errors import ConfigError, DataError, EcgFusionError
from .ingest import DatasetCatalog, catalog_build, read_record, write_record
from .morphology import (PcaProjection, RocketConfig, minirocket_fit, pca_apply,
                         pca_fit, transform_bag, write_feature_cache)
from .preprocess import preprocess_record
from .rhythm import write_hrv_cache
from .traineval import (StudyConfig, TrainSettings, ablation_run, run_cv,
                        FoldArtifacts, ema_init, lead_dropout_eval,
                        make_study_records, prepare_records, scan_scaling_bench,
                        subject_kfold, train_toy, zeroshot_eval, _standardize,
                        STUDY_CLASS_GROUPS)

SUBCOMMANDS = ("synth", "preprocess", "featurize", "train", "eval", "zeroshot",
               "ablate", "dropout", "bench", "saliency")

LEAD_INDEX = {name: i for i, name in enumerate(
    ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6"))}


@dataclass
class RunConfig:
    """Flat run configuration; field names double as config-file keys."""

    seed: int = 7
    # preprocessing
    low_hz: float = 0.5
    high_hz: float = 40.0
    filter_order: int = 4
    window: int = 2500
    stride: int = 1250
    # morphology
    num_features: int = 10_000
    # model
    d_model: int = 96
    n_blocks: int = 4
    state_dim: int = 16
    token_stride: int = 5
    n_heads: int = 8
    # pooling
    pool_q: float = 3.0
    # training
    lr_peak: float = 9e-4
    lr_floor: float = 1e-6
    epochs_bce: int = 2
    epochs_asl: int = 4
    batch_size: int = 32
    ema_decay: float = 0.999
    weight_decay: float = 0.01
    gamma_neg: float = 2.5
    gamma_pos: float = 0.0
    # evaluation protocol
    k_folds: int = 5
    tau: float = 0.5
    rhythm_group: str = "rhythm_regular;rhythm_irregular"
    morphology_group: str = "morph_normal;morph_notch"

    def class_groups(self) -> dict:
        groups = {}
        if self.rhythm_group:
            groups["rhythm"] = self.rhythm_group.split(";")
        if self.morphology_group:
            groups["morphology"] = self.morphology_group.split(";")
        return groups

    def study_config(self, n_classes: int) -> StudyConfig:
        return StudyConfig(
            n_classes=n_classes,
            k_folds=self.k_folds,
            tau=self.tau,
            pool_q=self.pool_q,
            seed=self.seed,
            window=self.window,
            stride=self.stride,
            low_hz=self.low_hz,
            high_hz=self.high_hz,
            filter_order=self.filter_order,
            num_features=self.num_features,
            d_model=self.d_model,
            n_blocks=self.n_blocks,
            state_dim=self.state_dim,
            token_stride=self.token_stride,
            n_heads=self.n_heads,
            train=TrainSettings(
                epochs_bce=self.epochs_bce,
                epochs_asl=self.epochs_asl,
                batch_size=self.batch_size,
                lr_peak=self.lr_peak,
                lr_floor=self.lr_floor,
                weight_decay=self.weight_decay,
                ema_decay=self.ema_decay,
                gamma_neg=self.gamma_neg,
                gamma_pos=self.gamma_pos,
                seed=self.seed,
            ),
            class_groups=self.class_groups(),
        )


def parse_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, _, value = line.partition("=")
        else:
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise ConfigError(f"{path}:{lineno}: cannot parse {line!r}")
            key, value = parts
        values[key.strip()] = value.strip()
    return values


def resolve_config(config_path=None, overrides=()) -> RunConfig:
    raw = {}
    if config_path:
        if not Path(config_path).exists():
            raise ConfigError(f"config file not found: {config_path}")
        raw.update(parse_config_file(config_path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, _, value = item.partition("=")
        raw[key.strip()] = value.strip()

    by_name = {f.name: f for f in fields(RunConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in by_name:
            raise ConfigError(f"unknown config key {key!r}")
        ftype = by_name[key].type
        try:
            if ftype in ("int", int):
                kwargs[key] = int(value)
            elif ftype in ("float", float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc
    return RunConfig(**kwargs)


def config_text(config: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(asdict(config).items()))


def write_manifest(out_dir: Path, config: RunConfig, command: str, extra=None) -> None:
    text = config_text(config)
    manifest = {
        "command": command,
        "config": asdict(config),
        "config_hash": hashlib.sha256(text.encode()).hexdigest(),
        "seed": config.seed,
        "versions": {
            "ecgfusion": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "torch": torch.__version__,
        },
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out_dir / "config.txt").write_text(text)


def _load_catalog_records(catalog_path):
    catalog = DatasetCatalog.load(catalog_path)
    base = Path(catalog_path).parent
    records = []
    for entry in catalog.entries:
        if not entry.path:
            raise DataError(f"catalog entry {entry.record_id} has no storage path",
                            code="missing-path")
        path = Path(entry.path)
        if not path.is_absolute():
            path = base / path
        records.append(read_record(path, "raw-f32"))
    return records, catalog


def _check_fs(records, expected: float = 500.0):
    for record in records:
        if record.fs != expected:
            raise DataError(
                f"record {record.record_id} has fs={record.fs}; resampling is out of "
                f"scope, expected {expected}",
                code="fs-mismatch",
            )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args, config: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, catalog = make_study_records(args.n, seed=config.seed)
    entries = []
    for record in records:
        rel = f"{record.record_id}.ecgf"
        write_record(record, out / rel, "raw-f32")
        entries.append(rel)
    rebuilt = catalog_build(records, paths=entries)
    rebuilt.save(out / "catalog.json")
    write_manifest(out, config, "synth", extra={"n_records": args.n})
    print(f"wrote {len(records)} records and catalog.json under {out}")
    return 0


def cmd_preprocess(args, config: RunConfig) -> int:
    record = read_record(args.record, args.format)
    _check_fs([record])
    bag = preprocess_record(record, config.window, config.stride,
                            config.low_hz, config.high_hz, config.filter_order)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, slices=np.stack(bag.slices).astype(np.float32),
             offsets=np.array(bag.offsets), window=bag.window, stride=bag.stride,
             record_id=bag.parent_record_id)
    print(f"{record.record_id}: {len(bag)} slices of {bag.window} samples -> {out}")
    return 0


def cmd_featurize(args, config: RunConfig) -> int:
    records, catalog = _load_catalog_records(args.catalog)
    _check_fs(records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    study = config.study_config(len(catalog.class_names))
    prepared = prepare_records(records, catalog, study)
    all_ids = [p.record_id for p in prepared]
    slices = np.concatenate([p.slices for p in prepared])
    rocket = minirocket_fit(slices, seed=config.seed, num_features=config.num_features,
                            record_ids=all_ids)
    rocket.save(out / "rocket.npz")
    entries = []
    feats = []
    for p in prepared:
        f = transform_bag(p.slices, rocket)
        feats.append(f)
        entries.extend((p.record_id, j, f[j]) for j in range(len(f)))
    write_feature_cache(out / "features.bin", entries)
    pca = pca_fit(np.concatenate(feats), d_out=study.model_config().morph_dim,
                  fold_id="train", record_ids=all_ids)
    pca.save(out / "pca.npz")
    write_hrv_cache(out / "hrv.bin", {p.record_id: p.hrv_raw for p in prepared})
    write_manifest(out, config, "featurize")
    print(f"featurized {len(prepared)} records ({rocket.feature_count} features) -> {out}")
    return 0


def _save_bundle(out: Path, model, ema, rocket, pca, scalers, log_rows) -> None:
    with torch_ema(model, ema):
        save_checkpoint(out / "checkpoint.npz", model, extra={"ema": True})
    rocket.save(out / "rocket.npz")
    pca.save(out / "pca.npz")
    np.savez(out / "scalers.npz", **scalers)
    lines = ["epoch,lr,loss,loss_kind,diverged"]
    lines += [f"{r['epoch']},{r['lr']:.8g},{r['loss']:.8g},{r['loss_kind']},{int(r['diverged'])}"
              for r in log_rows]
    (out / "log.csv").write_text("\n".join(lines) + "\n")


def torch_ema(model, ema):
    from .traineval import ema_parameters

    return ema_parameters(model, ema)


def _load_bundle(bundle_dir, n_classes: int) -> FoldArtifacts:
    bundle = Path(bundle_dir)
    for name in ("checkpoint.npz", "rocket.npz", "pca.npz", "scalers.npz"):
        if not (bundle / name).exists():
            raise DataError(f"bundle is missing {name}", code="bad-bundle")
    model = load_checkpoint(bundle / "checkpoint.npz")
    if model.config.n_classes != n_classes:
        raise DataError(
            f"checkpoint has {model.config.n_classes} classes, catalog has {n_classes}",
            code="class-mismatch",
        )
    rocket = RocketConfig.load(bundle / "rocket.npz")
    pca = PcaProjection.load(bundle / "pca.npz")
    with np.load(bundle / "scalers.npz") as z:
        scalers = {k: z[k].copy() for k in z.files}
    ema = ema_init(model, 1.0)  # checkpoint already holds the EMA weights
    return FoldArtifacts(fold=0, rocket=rocket, pca=pca, model=model, ema=ema, **scalers)


def cmd_train(args, config: RunConfig) -> int:
    records, catalog = _load_catalog_records(args.catalog)
    _check_fs(records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    study = config.study_config(len(catalog.class_names))
    if len(catalog.class_names) < 2:
        raise ConfigError("training needs at least 2 classes")
    prepared = prepare_records(records, catalog, study)
    all_idx = list(range(len(prepared)))
    audit = FitAudit()
    from .traineval import _fit_fold_features

    rocket, pca, scalers, morph = _fit_fold_features(prepared, all_idx, study, 0, audit)
    x = np.concatenate([p.slices for p in prepared])
    m = np.concatenate([_standardize(morph[i], scalers["morph_mean"], scalers["morph_std"])
                        for i in all_idx])
    h = np.concatenate([np.tile(_standardize(p.hrv_raw, scalers["hrv_mean"],
                                             scalers["hrv_std"]),
                                (len(p.slices), 1)) for p in prepared])
    y = np.concatenate([np.tile(p.labels, (len(p.slices), 1)) for p in prepared])
    model, ema, log_rows = train_toy(x, m, h, y, study.model_config(), study.train,
                                     audit=audit)
    _save_bundle(out, model, ema, rocket, pca, scalers, log_rows)
    (out / "class_names.json").write_text(json.dumps(list(catalog.class_names)))
    write_manifest(out, config, "train")
    print(f"trained on {len(prepared)} records; bundle -> {out}")
    return 0


def cmd_eval(args, config: RunConfig) -> int:
    records, catalog = _load_catalog_records(args.catalog)
    _check_fs(records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    study = config.study_config(len(catalog.class_names))
    report = run_cv(records, catalog, study)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    write_manifest(out, config, "eval")
    if report.protocol_deviation:
        print(f"WARNING: protocol deviation, tau={report.tau} != 0.5; flagged in report")
    agg = report.aggregate()
    print(f"macro ROC-AUC {agg['macro_roc_auc']['mean']:.4f} "
          f"+/- {agg['macro_roc_auc']['std']:.4f} over {study.k_folds} folds -> {out}")
    return 0


def cmd_zeroshot(args, config: RunConfig) -> int:
    records, catalog = _load_catalog_records(args.catalog)
    _check_fs(records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifact = _load_bundle(args.model, len(catalog.class_names))
    study = config.study_config(len(catalog.class_names))
    audit = FitAudit()
    report = zeroshot_eval(artifact, records, catalog, study, audit)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    write_manifest(out, config, "zeroshot",
                   extra={"fit_calls_during_eval": audit.total_fit_calls})
    print(f"zero-shot eval of {len(records)} records (fit calls: "
          f"{audit.total_fit_calls}) -> {out}")
    return 0


def cmd_ablate(args, config: RunConfig) -> int:
    records, catalog = _load_catalog_records(args.catalog)
    _check_fs(records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    study = config.study_config(len(catalog.class_names))
    report = ablation_run(records, catalog, study, args.variant)
    (out / f"report_{args.variant}.json").write_text(report.to_json())
    write_manifest(out, config, "ablate", extra={"variant": args.variant})
    agg = report.aggregate()
    print(f"{args.variant}: macro ROC-AUC {agg['macro_roc_auc']['mean']:.4f} -> {out}")
    return 0


def cmd_dropout(args, config: RunConfig) -> int:
    records, catalog = _load_catalog_records(args.catalog)
    _check_fs(records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        leads = [LEAD_INDEX[name] for name in args.leads.split(",")] if args.leads else []
    except KeyError as exc:
        raise ConfigError(f"unknown lead name {exc}") from exc
    study = config.study_config(len(catalog.class_names))
    _, artifacts, split, prepared = run_cv(records, catalog, study, collect_artifacts=True)
    deltas = lead_dropout_eval(artifacts, prepared, split, catalog, study, leads)
    (out / "dropout.json").write_text(json.dumps(deltas, indent=2, sort_keys=True))
    write_manifest(out, config, "dropout", extra={"masked_leads": leads})
    for group, stats in deltas["groups"].items():
        print(f"{group}: baseline {stats['baseline_auc']:.4f} -> "
              f"masked {stats['masked_auc']:.4f} (delta {stats['delta']:+.4f})")
    return 0


def cmd_bench(args, config: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lengths = [int(v) for v in args.lengths.split(",")]
    table = scan_scaling_bench(lengths, reps=args.reps, seed=config.seed)
    (out / "bench.json").write_text(json.dumps(table, indent=2, sort_keys=True))
    lines = ["length,median_s"] + [f"{r['length']},{r['median_s']:.6g}" for r in table["rows"]]
    lines += ["", "from,to,ratio"] + [
        f"{r['from']},{r['to']},{r['ratio']:.4f}" for r in table["ratios"]
    ]
    (out / "bench.csv").write_text("\n".join(lines) + "\n")
    write_manifest(out, config, "bench")
    for r in table["ratios"]:
        print(f"runtime({r['to']}) / runtime({r['from']}) = {r['ratio']:.3f}")
    return 0


def cmd_saliency(args, config: RunConfig) -> int:
    record = read_record(args.record, "raw-f32")
    _check_fs([record])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    class_names = json.loads((Path(args.model) / "class_names.json").read_text())
    artifact = _load_bundle(args.model, len(class_names))
    study = config.study_config(len(class_names))
    catalog = catalog_build([record])
    # the record's own labels may not match the model's vocabulary; saliency
    # only needs the inputs, so build features directly
    prepared = prepare_records([record], catalog, study)[0]
    from .traineval import _pad_width

    morph = _pad_width(pca_apply(transform_bag(prepared.slices, artifact.rocket),
                                 artifact.pca), artifact.morph_mean.shape[0])
    morph = _standardize(morph, artifact.morph_mean, artifact.morph_std)
    hrv = _standardize(prepared.hrv_raw, artifact.hrv_mean, artifact.hrv_std)
    x = torch.from_numpy(prepared.slices.astype(np.float32))
    m = torch.from_numpy(morph.astype(np.float32))
    h = torch.from_numpy(np.tile(hrv.astype(np.float32), (len(prepared.slices), 1)))
    with torch_ema(artifact.model, artifact.ema):
        maps = saliency(artifact.model, x, m, h)
    np.savez(out, saliency=maps.numpy(), record_id=record.record_id)
    print(f"saliency maps for {len(prepared.slices)} slices -> {out}")
    return 0


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecgfusion",
                                     description="ECG morphology/rhythm fusion pipeline")
    parser.add_argument("--config", help="flat key-value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)

    p = sub.add_parser("preprocess", help="filter, normalize, and slice one record")
    p.add_argument("--record", required=True)
    p.add_argument("--format", default="raw-f32", choices=("raw-f32", "csv"))
    p.add_argument("--out", required=True)
    for flag, key in (("--low-hz", "low_hz"), ("--high-hz", "high_hz"),
                      ("--order", "filter_order"), ("--window", "window"),
                      ("--stride", "stride")):
        p.add_argument(flag, dest=f"cfg_{key}", default=None)

    p = sub.add_parser("featurize", help="fit and cache morphology and rhythm features")
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a bundle on the whole catalog")
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="subject-aware cross-validated evaluation")
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("zeroshot", help="evaluate a trained bundle with zero fitting")
    p.add_argument("--model", required=True, help="bundle dir from `train`")
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="disable one pathway and re-evaluate")
    p.add_argument("--catalog", required=True)
    p.add_argument("--variant", required=True,
                   choices=("full", "no_hrv", "no_backbone", "no_morph"))
    p.add_argument("--out", required=True)

    p = sub.add_parser("dropout", help="lead-dropout delta study")
    p.add_argument("--catalog", required=True)
    p.add_argument("--leads", default="V1,V2,V3,V4,V5,V6",
                   help="comma-separated lead names to mask")
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench", help="scan runtime scaling benchmark")
    p.add_argument("--lengths", default="1024,2048,4096,8192")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("saliency", help="input-gradient saliency maps for one record")
    p.add_argument("--model", required=True)
    p.add_argument("--record", required=True)
    p.add_argument("--out", required=True)
    return parser


_HANDLERS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "eval": cmd_eval,
    "zeroshot": cmd_zeroshot,
    "ablate": cmd_ablate,
    "dropout": cmd_dropout,
    "bench": cmd_bench,
    "saliency": cmd_saliency,
}


def cmd_dispatch(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = list(args.overrides)
    # dedicated preprocess flags are sugar for --set
    for key, value in vars(args).items():
        if key.startswith("cfg_") and value is not None:
            overrides.append(f"{key[4:]}={value}")
    try:
        config = resolve_config(args.config, overrides)
        return _HANDLERS[args.command](args, config)
    except EcgFusionError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_code


def main() -> None:
    sys.exit(cmd_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
