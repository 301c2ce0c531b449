"""Command-line entry point: validate configs, run experiments, compare
reports, and generate synthetic benchmarks.

One structured JSON config drives an experiment end to end. Reruns with an
identical config reproduce every output byte-for-byte except wall-clock
fields: the ISO-8601 timestamp lives only in run_meta.json and per-epoch
wall_ms only in the training log.

Exit codes: 0 success, 2 config/data error, 3 runtime failure.

Stable finding codes: E_CONFIG_PARSE, E_CONFIG_FIELD, E_CONFIG_ID,
E_CONFIG_STRATEGY, E_CONFIG_K, E_CONFIG_CLASSES, E_CONFIG_EXPERT,
E_CONFIG_SPLIT, E_CONFIG_SYNTH, E_DATA_MISSING, E_DATA_FORMAT,
E_DATA_OVERLAP, E_SPLIT_MISSING, E_COMPARE_MIXED, E_OUTPUT_LOCKED.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import os
import re
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

from fusebench import __version__
from fusebench.embedstore import (
    AlignedDataset,
    EmbeddingFormatError,
    ManifestError,
    SampleManifest,
    assemble_dataset,
    load_manifest,
    read_embedding_header,
    read_embedding_set,
    save_manifest,
    stratified_split,
    write_embedding_set,
)
from fusebench.fusion import FusionConfig, init_model
from fusebench.metrics import evaluate_table
from fusebench.nncore import child_seed
from fusebench.synth import SynthSpec, gen_synthetic_benchmark
from fusebench.train import TrainConfig, predict_table, save_checkpoint, train

log = logging.getLogger(__name__)

OUT_ENV_VAR = "FUSIONFM_OUT"
_ID_RE = re.compile(r"^[A-Za-z0-9._-]+$")
METRIC_NAMES = ("auc", "f1", "acc")


@dataclass
class Finding:
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


class ConfigError(Exception):
    def __init__(self, findings: list[Finding]):
        super().__init__("; ".join(str(f) for f in findings))
        self.findings = findings


@dataclass
class ExperimentConfig:
    """One experiment: data source, split policy, model, training, eval."""

    experiment_id: str
    data: dict
    split: dict | str
    model: FusionConfig
    train: TrainConfig
    eval_n_boot: int
    eval_alpha: float
    eval_seed: int
    output_dir: Path
    raw: dict

    def config_hash(self) -> str:
        # output_dir is where results land, not what the experiment is:
        # excluded so relocating a run never changes its identity
        semantic = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return hashlib.sha256(
            json.dumps(semantic, sort_keys=True, separators=(",", ":")).encode("utf-8")
        ).hexdigest()[:16]

    def seeds(self) -> dict:
        seeds = {"train": self.train.seed, "eval": self.eval_seed}
        if isinstance(self.split, dict):
            seeds["split"] = self.split["seed"]
        if "synth" in self.data:
            seeds["synth"] = self.data["synth"]["seed"]
        return seeds


def _apply_overrides(raw: dict, seed: int | None, out: str | None) -> dict:
    """Fold CLI overrides into the config before hashing.

    ``--seed S`` rewrites every seed in the config to a child of S, so one
    flag produces a fully independent replica of the experiment.
    """
    raw = json.loads(json.dumps(raw))  # deep copy
    if seed is not None:
        raw.setdefault("train", {})["seed"] = child_seed(seed, "train")
        raw.setdefault("eval", {})["seed"] = child_seed(seed, "eval")
        if isinstance(raw.get("split"), dict):
            raw["split"]["seed"] = child_seed(seed, "split")
        if isinstance(raw.get("data"), dict) and "synth" in raw["data"]:
            raw["data"]["synth"]["seed"] = child_seed(seed, "synth")
    if out is not None:
        raw["output_dir"] = out
    elif os.environ.get(OUT_ENV_VAR):
        raw["output_dir"] = os.environ[OUT_ENV_VAR]
    return raw


def parse_config(raw: dict, base_dir: Path) -> ExperimentConfig:
    """Structural validation; raises ConfigError with coded findings."""
    findings: list[Finding] = []

    def fail(code: str, msg: str):
        findings.append(Finding(code, msg))

    if not isinstance(raw, dict):
        raise ConfigError([Finding("E_CONFIG_PARSE", "top-level config must be a JSON object")])
    for section in ("experiment_id", "data", "split", "model", "train", "eval", "output_dir"):
        if section not in raw:
            fail("E_CONFIG_FIELD", f"missing config section {section!r}")
    if findings:
        raise ConfigError(findings)

    exp_id = raw["experiment_id"]
    if not isinstance(exp_id, str) or not _ID_RE.match(exp_id or ""):
        fail("E_CONFIG_ID", f"experiment_id must match {_ID_RE.pattern}, got {exp_id!r}")

    data = raw["data"]
    if not isinstance(data, dict) or (("manifest" in data) == ("synth" in data)):
        fail("E_CONFIG_FIELD", 'data must carry either "manifest"+"embeddings" or "synth"')
    elif "manifest" in data and not isinstance(data.get("embeddings"), list):
        fail("E_CONFIG_FIELD", 'data.embeddings must be a list of paths')
    elif "synth" in data:
        try:
            SynthSpec.from_dict(data["synth"])
        except (KeyError, TypeError, ValueError) as exc:
            fail("E_CONFIG_SYNTH", f"invalid synth spec: {exc}")

    split = raw["split"]
    if split == "use-manifest":
        pass
    elif isinstance(split, dict):
        ratios = split.get("ratios")
        if (
            not isinstance(ratios, list)
            or len(ratios) != 3
            or any(not isinstance(r, (int, float)) or r < 0 for r in ratios)
            or abs(sum(ratios) - 1.0) > 1e-9
        ):
            fail("E_CONFIG_SPLIT", f"split.ratios must be 3 nonnegative numbers summing to 1, got {ratios!r}")
        if not isinstance(split.get("seed"), int):
            fail("E_CONFIG_SPLIT", "split.seed must be an integer")
    else:
        fail("E_CONFIG_SPLIT", 'split must be "use-manifest" or {"ratios": [...], "seed": int}')

    model_cfg = None
    try:
        model_cfg = FusionConfig.from_dict(raw["model"])
    except (KeyError, TypeError, ValueError) as exc:
        code = "E_CONFIG_K" if "top_k" in str(exc) else "E_CONFIG_STRATEGY"
        fail(code, f"invalid model config: {exc}")

    train_cfg = None
    try:
        known = set(TrainConfig.__dataclass_fields__)
        unknown = set(raw["train"]) - known
        if unknown:
            raise ValueError(f"unknown train fields {sorted(unknown)}")
        train_cfg = TrainConfig.from_dict(raw["train"])
    except (TypeError, ValueError) as exc:
        fail("E_CONFIG_FIELD", f"invalid train config: {exc}")

    ev = raw["eval"]
    if (
        not isinstance(ev, dict)
        or not isinstance(ev.get("n_boot", 1000), int)
        or ev.get("n_boot", 1000) < 1
        or not isinstance(ev.get("seed"), int)
        or not (0.0 < float(ev.get("alpha", 0.05)) < 1.0)
    ):
        fail("E_CONFIG_FIELD", 'eval must carry integer "seed", optional n_boot >= 1 and alpha in (0,1)')

    if findings:
        raise ConfigError(findings)
    assert model_cfg is not None and train_cfg is not None
    return ExperimentConfig(
        experiment_id=exp_id,
        data=data,
        split=split,
        model=model_cfg,
        train=train_cfg,
        eval_n_boot=int(ev.get("n_boot", 1000)),
        eval_alpha=float(ev.get("alpha", 0.05)),
        eval_seed=int(ev["seed"]),
        output_dir=(base_dir / raw["output_dir"]).resolve()
        if not os.path.isabs(raw["output_dir"])
        else Path(raw["output_dir"]),
        raw=raw,
    )


def _load_raw_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError([Finding("E_DATA_MISSING", f"config file not found: {path}")])
    except json.JSONDecodeError as exc:
        raise ConfigError([Finding("E_CONFIG_PARSE", f"config is not valid JSON: {exc}")])


def _check_data(cfg: ExperimentConfig, base_dir: Path) -> list[Finding]:
    """Data-level validation: files exist, headers parse, IDs overlap."""
    findings: list[Finding] = []
    if "synth" in cfg.data:
        spec = SynthSpec.from_dict(cfg.data["synth"])
        expert_names = {e.name: e.dim for e in spec.experts}
        manifest_ids = None
        num_classes = spec.num_classes
        all_assigned = False
    else:
        manifest_path = _resolve(cfg.data["manifest"], base_dir)
        if not manifest_path.exists():
            return [Finding("E_DATA_MISSING", f"manifest file not found: {manifest_path}")]
        try:
            manifest = load_manifest(manifest_path)
        except ManifestError as exc:
            return [Finding("E_DATA_FORMAT", f"manifest: {exc}")]
        manifest_ids = {e.sample_id for e in manifest.entries}
        num_classes = manifest.num_classes
        all_assigned = all(e.split != "unassigned" for e in manifest.entries)
        expert_names = {}
        for p in cfg.data["embeddings"]:
            path = _resolve(p, base_dir)
            if not path.exists():
                findings.append(Finding("E_DATA_MISSING", f"embedding file not found: {path}"))
                continue
            try:
                name, dim, count, _ = read_embedding_header(path)
            except EmbeddingFormatError as exc:
                findings.append(Finding("E_DATA_FORMAT", f"{path}: {exc}"))
                continue
            expert_names[name] = dim
            ids = read_embedding_set(path).sample_ids
            if manifest_ids is not None and not (manifest_ids & set(ids)):
                findings.append(
                    Finding("E_DATA_OVERLAP", f"no sample_id overlap between manifest and expert {name!r}")
                )

    for name in cfg.model.expert_subset:
        if name not in expert_names:
            findings.append(
                Finding(
                    "E_CONFIG_EXPERT",
                    f"model.expert_subset names {name!r} which no embedding set provides "
                    f"(available: {sorted(expert_names)})",
                )
            )
    if cfg.model.num_classes != num_classes:
        findings.append(
            Finding(
                "E_CONFIG_CLASSES",
                f"model.num_classes={cfg.model.num_classes} but data has {num_classes} classes",
            )
        )
    if cfg.split == "use-manifest" and not all_assigned:
        findings.append(
            Finding(
                "E_SPLIT_MISSING",
                'split is "use-manifest" but the manifest leaves samples unassigned',
            )
        )
    return findings


def _resolve(p: str, base_dir: Path) -> Path:
    path = Path(p)
    return path if path.is_absolute() else (base_dir / path).resolve()


def cmd_validate(config_path: str, seed: int | None = None, out: str | None = None) -> int:
    """Check config invariants, file headers, and ID overlap. Exit 0 iff valid."""
    base_dir = Path(config_path).resolve().parent
    try:
        raw = _apply_overrides(_load_raw_config(config_path), seed, out)
        cfg = parse_config(raw, base_dir)
    except ConfigError as exc:
        for f in exc.findings:
            print(str(f))
        print(f"INVALID ({len(exc.findings)} finding(s))")
        return 2
    findings = _check_data(cfg, base_dir)
    for f in findings:
        print(str(f))
    if findings:
        print(f"INVALID ({len(findings)} finding(s))")
        return 2
    print(f"OK: experiment {cfg.experiment_id!r} (config hash {cfg.config_hash()})")
    return 0


def _materialize_data(
    cfg: ExperimentConfig, base_dir: Path
) -> tuple[SampleManifest, list, AlignedDataset]:
    if "synth" in cfg.data:
        manifest, sets = gen_synthetic_benchmark(SynthSpec.from_dict(cfg.data["synth"]))
    else:
        manifest = load_manifest(_resolve(cfg.data["manifest"], base_dir))
        sets = [read_embedding_set(_resolve(p, base_dir)) for p in cfg.data["embeddings"]]
    if isinstance(cfg.split, dict):
        manifest = stratified_split(manifest, tuple(cfg.split["ratios"]), cfg.split["seed"])
    dataset = assemble_dataset(manifest, sets, list(cfg.model.expert_subset))
    return manifest, sets, dataset


def _split_fingerprint(dataset: AlignedDataset) -> str:
    test_idx = dataset.split_indices("test")
    payload = json.dumps(
        [[dataset.sample_ids[i], int(dataset.labels[i])] for i in test_idx], sort_keys=True
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _write_json(path: Path, obj: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def cmd_run(config_path: str, seed: int | None = None, out: str | None = None) -> int:
    """Split -> train -> bootstrap-evaluate the test split -> write artifacts.

    Artifacts: checkpoint.json, train_log.jsonl, report.json, report.csv,
    split_manifest.jsonl (when splitting here), run_meta.json. Every file
    embeds the experiment id, config hash, and seeds. A lockfile guards the
    output directory; on failure, partial outputs move to failed/.
    """
    base_dir = Path(config_path).resolve().parent
    try:
        raw = _apply_overrides(_load_raw_config(config_path), seed, out)
        cfg = parse_config(raw, base_dir)
        findings = _check_data(cfg, base_dir)
        if findings:
            raise ConfigError(findings)
    except ConfigError as exc:
        for f in exc.findings:
            print(str(f), file=sys.stderr)
        return 2

    outdir = cfg.output_dir
    outdir.mkdir(parents=True, exist_ok=True)
    lock_path = outdir / ".lock"
    try:
        lock_fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        print(f"E_OUTPUT_LOCKED: another run owns {outdir} (remove {lock_path} if stale)", file=sys.stderr)
        return 3
    os.write(lock_fd, str(os.getpid()).encode())
    os.close(lock_fd)

    written: list[Path] = []
    try:
        config_hash = cfg.config_hash()
        stamp = {
            "experiment_id": cfg.experiment_id,
            "config_hash": config_hash,
            "seeds": cfg.seeds(),
        }
        manifest, _sets, dataset = _materialize_data(cfg, base_dir)
        if dataset.dropped_ids:
            log.warning("join dropped %d sample(s)", len(dataset.dropped_ids))

        if isinstance(cfg.split, dict):
            split_path = outdir / "split_manifest.jsonl"
            save_manifest(split_path, manifest, extra_header=stamp)
            written.append(split_path)

        model = init_model(
            cfg.model, dataset.dims, seed=child_seed(cfg.train.seed, "init")
        )
        log_records: list[dict] = []
        ckpt = train(model, dataset, cfg.train, log_hook=log_records.append)

        log_path = outdir / "train_log.jsonl"
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(stamp, sort_keys=True) + "\n")
            for rec in log_records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        written.append(log_path)

        ckpt_path = outdir / "checkpoint.json"
        save_checkpoint(ckpt_path, ckpt, extra=stamp)
        written.append(ckpt_path)

        test_idx = dataset.split_indices("test")
        if test_idx.size < 2:
            raise RuntimeError(f"test split has {test_idx.size} sample(s); need >= 2")
        table = predict_table(ckpt.model, dataset, test_idx)
        report = evaluate_table(
            table, n_boot=cfg.eval_n_boot, alpha=cfg.eval_alpha, seed=cfg.eval_seed
        )

        report_obj = {
            "experiment_id": cfg.experiment_id,
            "config_hash": config_hash,
            "strategy": cfg.model.strategy,
            "expert_subset": list(cfg.model.expert_subset),
            "task": dataset.task_name,
            "split": "test",
            "metrics": {
                name: {"point": r.point, "low": r.ci_low, "high": r.ci_high}
                for name, r in report.metrics.items()
            },
            "n_boot": report.n_boot,
            "alpha": report.alpha,
            "seed": report.seed,
            "seeds": cfg.seeds(),
            "skipped_resamples": {name: r.skipped for name, r in report.metrics.items()},
            "degenerate_f1_classes": report.degenerate_f1_classes,
            "test_split_hash": _split_fingerprint(dataset),
            "best_epoch": ckpt.epoch,
            "best_val_auc": ckpt.val_auc,
        }
        report_path = outdir / "report.json"
        _write_json(report_path, report_obj)
        written.append(report_path)

        csv_path = outdir / "report.csv"
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["experiment_id", "config_hash", "task", "metric", "point", "low", "high", "n_boot", "seed"]
            )
            for name, r in report.metrics.items():
                writer.writerow(
                    [
                        cfg.experiment_id,
                        config_hash,
                        dataset.task_name,
                        name,
                        repr(r.point),
                        repr(r.ci_low),
                        repr(r.ci_high),
                        report.n_boot,
                        report.seed,
                    ]
                )
        written.append(csv_path)

        meta_path = outdir / "run_meta.json"
        _write_json(
            meta_path,
            {
                **stamp,
                "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
                "version": __version__,
            },
        )
        written.append(meta_path)
        print(f"run complete: {cfg.experiment_id} -> {outdir}")
        for name, r in report.metrics.items():
            print(f"  {name}: {r.point:.4f} [{r.ci_low:.4f}, {r.ci_high:.4f}]")
        return 0
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        failed_dir = outdir / "failed"
        failed_dir.mkdir(exist_ok=True)
        for p in written:
            if p.exists():
                shutil.move(str(p), str(failed_dir / p.name))
        print(f"run failed: {exc}", file=sys.stderr)
        return 3
    finally:
        lock_path.unlink(missing_ok=True)


def cmd_compare(report_paths: list[str], out: str | None = None) -> int:
    """Tabulate point estimates/CIs across reports, plus pairwise deltas.

    Reports must share the task and test-split fingerprint; the best
    experiment per metric is flagged.
    """
    reports = []
    for p in report_paths:
        try:
            with open(p, "r", encoding="utf-8") as fh:
                reports.append(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            print(f"E_DATA_MISSING: cannot read report {p}: {exc}", file=sys.stderr)
            return 2
    if not reports:
        print("E_DATA_MISSING: no reports given", file=sys.stderr)
        return 2
    tasks = {r.get("task") for r in reports}
    splits = {r.get("test_split_hash") for r in reports}
    if len(tasks) > 1 or len(splits) > 1:
        print(
            f"E_COMPARE_MIXED: reports span tasks {sorted(map(str, tasks))} / "
            f"split hashes {sorted(map(str, splits))}",
            file=sys.stderr,
        )
        return 2

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(
        ["kind", "metric", "experiment_id", "other_id", "point", "low", "high", "delta", "best"]
    )
    for metric in METRIC_NAMES:
        points = [(r["experiment_id"], r["metrics"][metric]) for r in reports]
        best_idx = max(range(len(points)), key=lambda i: points[i][1]["point"])
        for i, (exp_id, m) in enumerate(points):
            writer.writerow(
                [
                    "point",
                    metric,
                    exp_id,
                    "",
                    repr(m["point"]),
                    repr(m["low"]),
                    repr(m["high"]),
                    "",
                    1 if i == best_idx else 0,
                ]
            )
        for i in range(len(points)):
            for j in range(i + 1, len(points)):
                delta = points[j][1]["point"] - points[i][1]["point"]
                writer.writerow(
                    ["delta", metric, points[i][0], points[j][0], "", "", "", repr(delta), ""]
                )
    text = buf.getvalue()
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(config_path: str, seed: int | None = None, out: str | None = None) -> int:
    """Generate the config's synthetic benchmark to disk (manifest + embeddings)."""
    base_dir = Path(config_path).resolve().parent
    try:
        raw = _apply_overrides(_load_raw_config(config_path), seed, out)
        cfg = parse_config(raw, base_dir)
        if "synth" not in cfg.data:
            raise ConfigError([Finding("E_CONFIG_SYNTH", "config has no data.synth section")])
    except ConfigError as exc:
        for f in exc.findings:
            print(str(f), file=sys.stderr)
        return 2
    manifest, sets = gen_synthetic_benchmark(SynthSpec.from_dict(cfg.data["synth"]))
    outdir = cfg.output_dir
    outdir.mkdir(parents=True, exist_ok=True)
    manifest_path = outdir / "manifest.jsonl"
    save_manifest(manifest_path, manifest)
    print(f"wrote {manifest_path}")
    for es in sets:
        path = outdir / f"{es.expert_name}.emb"
        write_embedding_set(path, es)
        print(f"wrote {path} ({len(es.sample_ids)} x {es.dim})")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fusebench",
        description="Train and evaluate fused classification probes over frozen embeddings.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override all config seeds")
        p.add_argument("--out", default=None, help="override output_dir")

    add_common(sub.add_parser("validate", help="check a config and its data files"))
    add_common(sub.add_parser("run", help="run one experiment end to end"))
    add_common(sub.add_parser("synth", help="generate the synthetic benchmark only"))
    cmp_p = sub.add_parser("compare", help="compare metric reports")
    cmp_p.add_argument("reports", nargs="+", help="report.json paths")
    cmp_p.add_argument("--out", default=None, help="write comparison CSV here (default stdout)")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "validate":
        return cmd_validate(args.config, args.seed, args.out)
    if args.command == "run":
        return cmd_run(args.config, args.seed, args.out)
    if args.command == "synth":
        return cmd_synth(args.config, args.seed, args.out)
    if args.command == "compare":
        return cmd_compare(args.reports, args.out)
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
