"""Command-line pipeline: synth, ingest, split, train, infer, delineate,
eval, report.

One JSON config file drives every stage; all randomness flows from its
single seed. Every artifact is stamped with the hash of the scientific
part of the config (everything except filesystem paths, so identical
experiments in different working directories produce identical
artifacts), and ``report`` refuses to mix artifacts with different
hashes unless forced.

Exit codes: 0 success, 1 config or usage error, 2 I/O error,
3 computation/metric error.

Environment overrides (paths only): ECGINTERVALS_DATA_DIR,
ECGINTERVALS_CACHE_DIR, ECGINTERVALS_OUT_DIR.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import baseline_delineator as bd
from . import dataio, sigproc, synthgen
from . import ikres_model as im
from . import tandem_eval as te
from . import training as tr

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_COMPUTE = 3

TASKS = ("qt", "qrs", "pr", "prchk")


class ConfigError(Exception):
    """Invalid run configuration; message carries the field path."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULT_CONFIG: dict = {
    "seed": 1234,
    "paths": {"data_dir": "data", "cache_dir": "cache", "out_dir": "out"},
    "preprocess": {
        "target_rate": 250,
        "band_low": 0.05,
        "band_high": 40.0,
        "amplitude_limit_mv": 5.0,
    },
    "model": {
        "ingest_filters": 64,
        "block_filters": [128, 196, 256, 320],
        "kernel": 16,
        "input_len": 2500,
        "head_hidden": 64,
    },
    "train": {
        "lr0": 0.01,
        "lr_decay": 0.5,
        "decay_every": 3,
        "batch_size": 64,
        "max_epochs": 20,
        "patience": 3,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
    },
    "synth": {"n": 1000, "zero_pr_fraction": 0.03},
    "baseline": {"operating_rate": 500},
    "tasks": ["qt", "qrs", "pr", "prchk"],
    "split_fractions": [0.70, 0.15, 0.15],
}


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"{path}: unknown configuration field")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected an object")
            out[key] = _merge(base[key], value, prefix=f"{path}.")
        else:
            out[key] = value
    return out


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {message}")


def validate_config(cfg: dict) -> None:
    _require(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "seed", "must be a non-negative integer")
    pp = cfg["preprocess"]
    _require(pp["target_rate"] > 0, "preprocess.target_rate", "must be positive")
    _require(
        0 < pp["band_low"] < pp["band_high"] < pp["target_rate"] / 2,
        "preprocess.band_low",
        "band edges must satisfy 0 < low < high < rate/2",
    )
    _require(pp["amplitude_limit_mv"] > 0, "preprocess.amplitude_limit_mv", "must be positive")
    m = cfg["model"]
    _require(len(m["block_filters"]) == 4, "model.block_filters", "exactly four residual blocks")
    _require(m["kernel"] >= 1, "model.kernel", "must be >= 1")
    _require(
        m["input_len"] == pp["target_rate"] * 10,
        "model.input_len",
        f"must equal preprocess.target_rate * 10 = {pp['target_rate'] * 10}",
    )
    t = cfg["train"]
    _require(t["lr0"] > 0, "train.lr0", "must be positive")
    _require(t["batch_size"] >= 1, "train.batch_size", "must be >= 1")
    _require(t["max_epochs"] >= 1, "train.max_epochs", "must be >= 1")
    _require(t["patience"] >= 1, "train.patience", "must be >= 1")
    s = cfg["synth"]
    _require(s["n"] >= 1, "synth.n", "must be >= 1")
    _require(0 <= s["zero_pr_fraction"] < 1, "synth.zero_pr_fraction", "must be in [0, 1)")
    fr = cfg["split_fractions"]
    _require(len(fr) == 3 and abs(sum(fr) - 1.0) < 1e-9, "split_fractions", "three fractions summing to 1")
    for task in cfg["tasks"]:
        _require(task in TASKS, "tasks", f"unknown task {task!r}")


def load_config(path: Optional[str], seed_override: Optional[int] = None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config: file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config: invalid JSON: {e}")
        cfg = _merge(cfg, user)
    if seed_override is not None:
        cfg["seed"] = seed_override
    for env, key in (
        ("ECGINTERVALS_DATA_DIR", "data_dir"),
        ("ECGINTERVALS_CACHE_DIR", "cache_dir"),
        ("ECGINTERVALS_OUT_DIR", "out_dir"),
    ):
        if os.environ.get(env):
            cfg["paths"][key] = os.environ[env]
    validate_config(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    """Hash of the scientific configuration; paths are excluded so the
    same experiment hashes identically anywhere on disk."""
    hashed = {k: v for k, v in cfg.items() if k != "paths"}
    canon = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def preprocess_config(cfg: dict) -> sigproc.PreprocessConfig:
    pp = cfg["preprocess"]
    return sigproc.PreprocessConfig(
        target_rate=pp["target_rate"],
        band_low=pp["band_low"],
        band_high=pp["band_high"],
        amplitude_limit_mv=pp["amplitude_limit_mv"],
    )


def model_config(cfg: dict) -> im.IKresConfig:
    m = cfg["model"]
    return im.IKresConfig(
        ingest_filters=m["ingest_filters"],
        block_filters=tuple(m["block_filters"]),
        kernel=m["kernel"],
        input_len=m["input_len"],
        head_hidden=m["head_hidden"],
    )


def train_config(cfg: dict) -> tr.TrainConfig:
    t = cfg["train"]
    return tr.TrainConfig(
        lr0=t["lr0"],
        lr_decay=t["lr_decay"],
        decay_every=t["decay_every"],
        batch_size=t["batch_size"],
        max_epochs=t["max_epochs"],
        patience=t["patience"],
        adam_beta1=t["adam_beta1"],
        adam_beta2=t["adam_beta2"],
        adam_eps=t["adam_eps"],
        seed=cfg["seed"],
    )


def delineator_config(cfg: dict) -> bd.DelineatorConfig:
    return bd.DelineatorConfig(operating_rate=cfg["baseline"]["operating_rate"])


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _paths(cfg: dict) -> tuple[Path, Path, Path]:
    p = cfg["paths"]
    return Path(p["data_dir"]), Path(p["cache_dir"]), Path(p["out_dir"])


def _manifest_path(cfg: dict) -> Path:
    return _paths(cfg)[0] / "manifest.json"


def _read_manifest(cfg: dict) -> dataio.DatasetManifest:
    path = _manifest_path(cfg)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path} (run `synth` or `ingest` first)")
    return dataio.manifest_from_json(path.read_text(encoding="utf-8"))


def _load_split(
    cfg: dict, manifest: dataio.DatasetManifest, split: str
) -> tuple[tr.PreparedSplit, list[tuple[str, str]]]:
    """Load + preprocess one split, with a binary vector cache keyed on the
    config hash."""
    data_dir, cache_dir, _ = _paths(cfg)
    chash = config_hash(cfg)
    cache_dir.mkdir(parents=True, exist_ok=True)
    vec_path = cache_dir / f"{split}-{chash}.vec"
    meta_path = cache_dir / f"{split}-{chash}.json"
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty; run `split` first")
    by_id = {e.record_id: e for e in entries}

    if vec_path.exists() and meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        if meta.get("record_ids") and set(meta["record_ids"]) <= set(by_id):
            x = sigproc.load_vectors(vec_path)
            ids = meta["record_ids"]
            labels = [by_id[i].labels for i in ids]
            split_data = tr.PreparedSplit(
                record_ids=ids,
                x=x[:, None, :],
                pr_ms=np.array([l.pr_ms for l in labels]),
                qrs_ms=np.array([l.qrs_ms for l in labels]),
                qt_ms=np.array([l.qt_ms for l in labels]),
                hr_bpm=np.array([l.hr_bpm for l in labels]),
                pr_present=np.array([l.pr_present for l in labels], dtype=bool),
            )
            return split_data, [tuple(e) for e in meta.get("excluded", [])]

    records, labels = [], []
    for entry in entries:
        if entry.locator is None:
            raise FileNotFoundError(f"record {entry.record_id} has no waveform locator")
        records.append(dataio.read_record(data_dir / entry.locator, "I"))
        labels.append(entry.labels)
    prepared, excluded = tr.prepare_split(records, labels, preprocess_config(cfg))
    sigproc.save_vectors(vec_path, prepared.x[:, 0, :])
    meta_path.write_text(
        json.dumps({"record_ids": prepared.record_ids, "excluded": excluded}, indent=2),
        encoding="utf-8",
    )
    return prepared, excluded


def _emit(result: dict, as_json: bool) -> None:
    if as_json:
        print(json.dumps(result, sort_keys=True))
    else:
        for key, value in result.items():
            print(f"{key}: {value}")


def _write_jsonl(path: Path, header: dict, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> tuple[dict, list[dict]]:
    with open(path, "r", encoding="utf-8") as f:
        lines = [line for line in f.read().splitlines() if line.strip()]
    if not lines:
        raise ValueError(f"{path}: empty predictions file")
    header = json.loads(lines[0])
    return header, [json.loads(line) for line in lines[1:]]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: dict, args) -> dict:
    data_dir, _, _ = _paths(cfg)
    n = args.n or cfg["synth"]["n"]
    dist = synthgen.ParamDistribution(zero_pr_fraction=cfg["synth"]["zero_pr_fraction"])
    corpus = synthgen.synth_corpus(n, dist=dist, seed=cfg["seed"])
    manifest = synthgen.write_corpus(corpus, data_dir, config_hash=config_hash(cfg))
    n_zero = sum(1 for e in manifest.entries if not e.labels.pr_present)
    return {
        "command": "synth",
        "records": len(manifest.entries),
        "zero_pr": n_zero,
        "data_dir": str(data_dir),
        "config_hash": config_hash(cfg),
    }


def cmd_ingest(cfg: dict, args) -> dict:
    data_dir, _, _ = _paths(cfg)
    labels_path = data_dir / "labels.csv"
    if not labels_path.exists():
        raise FileNotFoundError(f"label table not found: {labels_path}")
    entries_raw, skipped = dataio.parse_label_table(labels_path.read_bytes())
    labels_by_id = dict(entries_raw)
    entries = []
    missing = []
    for hea in sorted(data_dir.glob("*.hea")):
        record = dataio.read_record(hea, "I")
        if record.record_id not in labels_by_id:
            missing.append(record.record_id)
            continue
        entries.append(
            dataio.ManifestEntry(
                record_id=record.record_id,
                patient_id=record.patient_id or record.record_id,
                locator=hea.name,
                labels=labels_by_id[record.record_id],
            )
        )
    if not entries:
        raise ValueError(f"no usable records under {data_dir}")
    manifest = dataio.DatasetManifest(entries=entries, config_hash=config_hash(cfg))
    _manifest_path(cfg).write_text(dataio.manifest_to_json(manifest), encoding="utf-8")
    return {
        "command": "ingest",
        "records": len(entries),
        "skipped_label_rows": len(skipped),
        "records_without_labels": len(missing),
        "manifest": str(_manifest_path(cfg)),
    }


def cmd_split(cfg: dict, args) -> dict:
    manifest = _read_manifest(cfg)
    split = dataio.split_by_patient(manifest, tuple(cfg["split_fractions"]), seed=cfg["seed"])
    split.config_hash = config_hash(cfg)
    _manifest_path(cfg).write_text(dataio.manifest_to_json(split), encoding="utf-8")
    counts = {name: len(split.split(name)) for name in dataio.SPLIT_NAMES}
    return {"command": "split", "seed": cfg["seed"], **counts}


def cmd_train(cfg: dict, args) -> dict:
    if not args.task:
        raise ConfigError("task: --task is required for train")
    _, _, out_dir = _paths(cfg)
    manifest = _read_manifest(cfg)
    train_split, excl_train = _load_split(cfg, manifest, "train")
    val_split, _ = _load_split(cfg, manifest, "validation")
    log_path = out_dir / "logs" / f"{args.task}.ndjson"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []

    with open(log_path, "w", encoding="utf-8") as log_file:
        def log_fn(entry: dict) -> None:
            log_file.write(json.dumps(entry, sort_keys=True) + "\n")
            log_file.flush()
            entries.append(entry)

        ckpt, log = tr.train_task(
            args.task,
            train_split,
            val_split,
            model_config(cfg),
            train_config(cfg),
            config_hash=config_hash(cfg),
            log_fn=log_fn,
        )
    ckpt_path = out_dir / "checkpoints" / f"{args.task}.ckpt"
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    im.save_checkpoint(ckpt, ckpt_path)
    result = {
        "command": "train",
        "task": args.task,
        "epochs": len(log),
        "best_epoch": log[0]["best_epoch"] if log else None,
        "best_val_loss": min(e["val_loss"] for e in log),
        "checkpoint": str(ckpt_path),
        "log": str(log_path),
        "excluded_preprocessing": len(excl_train),
        "config_hash": config_hash(cfg),
    }
    if args.task == "pr" and log and "excluded_zero_pr" in log[0]:
        result["excluded_zero_pr"] = log[0]["excluded_zero_pr"]
    if args.task == "prchk":
        result["threshold"] = ckpt.prchk_threshold
    return result


def _checkpoint(cfg: dict, task: str) -> im.ModelCheckpoint:
    _, _, out_dir = _paths(cfg)
    path = out_dir / "checkpoints" / f"{task}.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path} (run `train --task {task}`)")
    return im.load_checkpoint(path)


def cmd_infer(cfg: dict, args) -> dict:
    if not args.task:
        raise ConfigError("task: --task is required for infer")
    _, _, out_dir = _paths(cfg)
    manifest = _read_manifest(cfg)
    split, _ = _load_split(cfg, manifest, args.split)
    chash = config_hash(cfg)

    if args.task == "tandem-pr":
        prchk = _checkpoint(cfg, "prchk")
        pr = _checkpoint(cfg, "pr")
        results = te.tandem_pr_inference(split.x, split.record_ids, prchk, pr)
        rows = [
            {
                "record_id": r.record_id,
                "probability": r.probability,
                "emitted": r.emitted,
                "pr_ms": r.pr_ms,
            }
            for r in results
        ]
        task_name = "tandem-pr"
    else:
        ckpt = _checkpoint(cfg, args.task)
        out = tr.predict(ckpt.params, ckpt.config, args.task, split.x)
        rows = []
        if args.task == "prchk":
            for rid, prob in zip(split.record_ids, out[:, 0]):
                rows.append({"record_id": rid, "probability": float(prob)})
        else:
            values = ckpt.normalizer.inverse(out)
            names = im.HEAD_TARGETS[args.task]
            for i, rid in enumerate(split.record_ids):
                row = {"record_id": rid}
                for j, name in enumerate(names):
                    row[name] = float(values[i, j])
                rows.append(row)
        task_name = args.task

    path = out_dir / "predictions" / f"{task_name}-{args.split}.jsonl"
    header = {"kind": "predictions", "task": task_name, "split": args.split,
              "dataset_id": f"synthetic-{args.split}", "config_hash": chash}
    _write_jsonl(path, header, rows)
    return {"command": "infer", "task": task_name, "records": len(rows), "out": str(path)}


def cmd_delineate(cfg: dict, args) -> dict:
    data_dir, _, out_dir = _paths(cfg)
    manifest = _read_manifest(cfg)
    entries = manifest.split(args.split)
    if not entries:
        raise ValueError(f"split {args.split!r} is empty")
    dcfg = delineator_config(cfg)
    pcfg = preprocess_config(cfg)
    rows = []
    n_failed = 0
    for entry in entries:
        record = dataio.read_record(data_dir / entry.locator, "I")
        try:
            vec = sigproc.preprocess(record, pcfg)
        except sigproc.RecordRejected as e:
            rows.append({"record_id": entry.record_id, "error": e.reason})
            n_failed += 1
            continue
        try:
            x = vec
            rate = pcfg.target_rate
            op_rate = dcfg.operating_rate
            xi = sigproc.resample(x, rate, op_rate) if rate != op_rate else x
            peaks = bd.detect_r_peaks(xi, op_rate, dcfg)
            beats = bd.delineate(xi, op_rate, peaks, dcfg) if peaks else []
            est = bd.intervals_from_fiducials(beats, op_rate)
        except bd.DelineationError as e:
            rows.append({"record_id": entry.record_id, "error": str(e)})
            n_failed += 1
            continue
        rows.append(
            {
                "record_id": entry.record_id,
                "pr_ms": est.pr_ms,
                "qrs_ms": est.qrs_ms,
                "qt_ms": est.qt_ms,
                "hr_bpm": est.hr_bpm,
                "n_beats": est.n_beats,
                "beats": [
                    {
                        "p_onset": b.p_onset,
                        "qrs_onset": b.qrs_onset,
                        "r_peak": b.r_peak,
                        "qrs_offset": b.qrs_offset,
                        "t_offset": b.t_offset,
                    }
                    for b in beats
                ],
            }
        )
    path = out_dir / "predictions" / f"baseline-{args.split}.jsonl"
    header = {"kind": "predictions", "task": "baseline", "split": args.split,
              "dataset_id": f"synthetic-{args.split}", "config_hash": config_hash(cfg)}
    _write_jsonl(path, header, rows)
    return {"command": "delineate", "records": len(rows), "failed": n_failed, "out": str(path)}


TARGET_COLUMNS = {"qt_ms": "qt_ms", "qrs_ms": "qrs_ms", "pr_ms": "pr_ms", "hr_bpm": "hr_bpm"}


def _labels_for(manifest: dataio.DatasetManifest, split: str) -> dict[str, dataio.IntervalLabels]:
    return {e.record_id: e.labels for e in manifest.split(split)}


def cmd_eval(cfg: dict, args) -> dict:
    _, _, out_dir = _paths(cfg)
    manifest = _read_manifest(cfg)
    labels = _labels_for(manifest, args.split)
    if not labels:
        raise ValueError(f"split {args.split!r} is empty")
    chash = config_hash(cfg)
    train_labels = _labels_for(manifest, "train")

    report = te.MetricsReport(dataset_id=f"synthetic-{args.split}", config_hash=chash)
    pred_dir = out_dir / "predictions"
    used_files = []
    ckpt_dir = out_dir / "checkpoints"
    if ckpt_dir.exists():
        for ckpt_file in sorted(ckpt_dir.glob("*.ckpt")):
            digest = hashlib.sha256(ckpt_file.read_bytes()).hexdigest()[:12]
            report.checkpoint_ids[ckpt_file.stem] = digest

    def check_hash(header: dict, path: Path) -> None:
        if header.get("config_hash") not in (None, chash) and not args.force:
            raise ValueError(
                f"{path}: config hash {header.get('config_hash')} does not match "
                f"{chash}; rerun the stage or pass --force"
            )

    # model predictions per task
    for task in ("qt", "qrs", "pr"):
        path = pred_dir / f"{task}-{args.split}.jsonl"
        if not path.exists():
            continue
        header, rows = _read_jsonl(path)
        check_hash(header, path)
        used_files.append(str(path))
        for target in im.HEAD_TARGETS[task]:
            pairs = [
                (row[target], getattr(labels[row["record_id"]], target))
                for row in rows
                if row["record_id"] in labels
                and (target != "pr_ms" or labels[row["record_id"]].pr_present)
            ]
            if pairs:
                p, y = np.array([a for a, _ in pairs]), np.array([b for _, b in pairs])
                report.add_regression(target, f"ikres-{task}", p, y)
        # the mean predictor trained on the training split is the floor
        for target in im.HEAD_TARGETS[task]:
            train_vals = [
                getattr(l, target)
                for l in train_labels.values()
                if target != "pr_ms" or l.pr_present
            ]
            if not train_vals:
                continue
            mean_val = float(np.mean(train_vals))
            pairs = [
                getattr(l, target)
                for rid, l in labels.items()
                if target != "pr_ms" or l.pr_present
            ]
            y = np.array(pairs)
            report.add_regression(target, "train-mean", np.full(y.shape, mean_val), y)

    # tandem: PR metrics over emitted records only
    tandem_path = pred_dir / f"tandem-pr-{args.split}.jsonl"
    tandem_stats = None
    if tandem_path.exists():
        header, rows = _read_jsonl(tandem_path)
        check_hash(header, tandem_path)
        used_files.append(str(tandem_path))
        emitted = [r for r in rows if r["emitted"] and r["record_id"] in labels]
        pairs = [
            (r["pr_ms"], labels[r["record_id"]].pr_ms)
            for r in emitted
            if labels[r["record_id"]].pr_present
        ]
        if pairs:
            p, y = np.array([a for a, _ in pairs]), np.array([b for _, b in pairs])
            report.add_regression("pr_ms", "ikres-tandem-pr", p, y)
        n_zero = sum(1 for r in rows if r["record_id"] in labels
                     and not labels[r["record_id"]].pr_present)
        n_zero_suppressed = sum(
            1 for r in rows
            if r["record_id"] in labels
            and not labels[r["record_id"]].pr_present
            and not r["emitted"]
        )
        tandem_stats = {
            "n_records": len(rows),
            "n_emitted": sum(1 for r in rows if r["emitted"]),
            "n_zero_pr": n_zero,
            "n_zero_pr_suppressed": n_zero_suppressed,
        }

    # classifier metrics
    prchk_path = pred_dir / f"prchk-{args.split}.jsonl"
    if prchk_path.exists():
        header, rows = _read_jsonl(prchk_path)
        check_hash(header, prchk_path)
        used_files.append(str(prchk_path))
        scores = np.array([r["probability"] for r in rows if r["record_id"] in labels])
        y = np.array([int(labels[r["record_id"]].pr_present) for r in rows
                      if r["record_id"] in labels])
        if scores.size and y.min() != y.max():
            try:
                threshold = _checkpoint(cfg, "prchk").prchk_threshold
            except FileNotFoundError:
                threshold = 0.5
            report.set_classification(scores, y, threshold=threshold or 0.5)

    # heuristic baseline
    baseline_path = pred_dir / f"baseline-{args.split}.jsonl"
    if baseline_path.exists():
        header, rows = _read_jsonl(baseline_path)
        check_hash(header, baseline_path)
        used_files.append(str(baseline_path))
        for target in ("qt_ms", "qrs_ms", "pr_ms", "hr_bpm"):
            pairs = [
                (row[target], getattr(labels[row["record_id"]], target))
                for row in rows
                if row.get(target) is not None
                and row["record_id"] in labels
                and (target != "pr_ms" or labels[row["record_id"]].pr_present)
            ]
            if pairs:
                p, y = np.array([a for a, _ in pairs]), np.array([b for _, b in pairs])
                report.add_regression(target, "baseline-delineator", p, y)

    if not used_files:
        raise ValueError(f"no prediction files found under {pred_dir} for split {args.split!r}")

    doc = report.to_dict()
    doc["kind"] = "metrics"
    if tandem_stats:
        doc["tandem"] = tandem_stats
    metrics_path = out_dir / "metrics" / f"{args.split}.json"
    metrics_path.parent.mkdir(parents=True, exist_ok=True)
    metrics_path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")

    if args.plots:
        plots_dir = out_dir / "plots"
        plots_dir.mkdir(parents=True, exist_ok=True)
        for task in ("qt", "qrs", "pr"):
            path = pred_dir / f"{task}-{args.split}.jsonl"
            if not path.exists():
                continue
            _, rows = _read_jsonl(path)
            for target in im.HEAD_TARGETS[task]:
                pairs = [
                    (row[target], getattr(labels[row["record_id"]], target))
                    for row in rows
                    if row["record_id"] in labels
                    and (target != "pr_ms" or labels[row["record_id"]].pr_present)
                ]
                if len(pairs) >= 10:
                    p = np.array([a for a, _ in pairs])
                    y = np.array([b for _, b in pairs])
                    te.kde_plot(
                        p, y,
                        plots_dir / f"{target}-{args.split}.svg",
                        csv_path=plots_dir / f"{target}-{args.split}.csv",
                        title=f"{target} ({args.split})",
                    )

    return {"command": "eval", "metrics": str(metrics_path), "inputs": len(used_files)}


def cmd_report(cfg: dict, args) -> dict:
    _, _, out_dir = _paths(cfg)
    metrics_dir = out_dir / "metrics"
    files = sorted(metrics_dir.glob("*.json")) if metrics_dir.exists() else []
    if not files:
        raise FileNotFoundError(f"no metrics files under {metrics_dir} (run `eval` first)")
    chash = config_hash(cfg)
    merged: Optional[te.MetricsReport] = None
    tandem = None
    for path in files:
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("config_hash") != chash and not args.force:
            raise ValueError(
                f"{path}: config hash {doc.get('config_hash')} does not match {chash}; "
                "pass --force to mix"
            )
        rep = te.MetricsReport(dataset_id=doc["dataset_id"], config_hash=doc["config_hash"])
        rep.regression = doc["regression"]
        rep.classification = doc.get("classification")
        rep.checkpoint_ids = doc.get("checkpoint_ids", {})
        tandem = doc.get("tandem", tandem)
        merged = rep if merged is None else _merge_reports(merged, rep)
    json_path = out_dir / "report.json"
    table_path = out_dir / "report.txt"
    doc = merged.to_dict()
    if tandem:
        doc["tandem"] = tandem
    json_path.write_bytes(json.dumps(doc, indent=2, sort_keys=True).encode("utf-8"))
    te.emit_report(merged, table_path, fmt="table")
    return {"command": "report", "report_json": str(json_path), "report_table": str(table_path)}


def _merge_reports(a: te.MetricsReport, b: te.MetricsReport) -> te.MetricsReport:
    for target, methods in b.regression.items():
        for method, row in methods.items():
            a.regression.setdefault(target, {})[method] = row
    if a.classification is None:
        a.classification = b.classification
    a.checkpoint_ids.update(b.checkpoint_ids)
    return a


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecgintervals",
        description="Lead-I ECG interval estimation workbench",
    )
    parser.add_argument("--config", help="path to the run-config JSON file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--n", type=int, help="number of records (default from config)")

    sub.add_parser("ingest", help="build a manifest from waveform files + labels.csv")

    sub.add_parser("split", help="assign patient-disjoint train/validation/holdout")

    p = sub.add_parser("train", help="train one task")
    p.add_argument("--task", choices=list(TASKS))

    p = sub.add_parser("infer", help="run a checkpoint over a split")
    p.add_argument("--task", choices=list(TASKS) + ["tandem-pr"])
    p.add_argument("--split", default="holdout", choices=list(dataio.SPLIT_NAMES))

    p = sub.add_parser("delineate", help="run the heuristic baseline over a split")
    p.add_argument("--split", default="holdout", choices=list(dataio.SPLIT_NAMES))

    p = sub.add_parser("eval", help="compute metrics from prediction files")
    p.add_argument("--split", default="holdout", choices=list(dataio.SPLIT_NAMES))
    p.add_argument("--plots", action="store_true", help="emit KDE plots (SVG + CSV grid)")
    p.add_argument("--force", action="store_true", help="allow mixed config hashes")

    p = sub.add_parser("report", help="merge metrics files into the final report")
    p.add_argument("--force", action="store_true", help="allow mixed config hashes")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "split": cmd_split,
    "train": cmd_train,
    "infer": cmd_infer,
    "delineate": cmd_delineate,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, seed_override=args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, OSError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, dataio.DataError, sigproc.SigprocError, synthgen.SynthError,
            tr.TrainingError, te.EvalError, im.ModelError, im.CheckpointError,
            bd.DelineationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_COMPUTE
    _emit(result, args.json)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
