"""Command-line entry point: ``meft {train,eval,sweep,compare,profile}``.

Exit codes: 0 ok, 2 configuration error, 3 divergence, 4 partial sweep failure.
Output goes to ``--out``, else the config's ``out``, else
``$MEFT_OUT_ROOT/<command>`` (``./runs/<command>`` when the variable is unset).
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .adapter import activation_profile
from .data import FactDataset, gen_fact_dataset, load_dataset, pack
from .memtier import (
    CheckpointError,
    beta_from_unions,
    brutal_offload_cost,
    load_checkpoint,
    predicted_cost,
    save_checkpoint,
)
from .model import ToyModel, ToyModelConfig
from .train import (
    DensePath,
    DivergenceError,
    Trainer,
    TrainResult,
    TrainSchedule,
    eval_em,
    experts_for,
    sweep_batchsize,
)

log = logging.getLogger("meft")

OUT_ROOT_ENV = "MEFT_OUT_ROOT"
SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_PARTIAL = 0, 2, 3, 4
AXES = ("kv_pairs", "K", "experts", "batch")

# the headline comparison this tool reproduces at the reference large-model geometry
REFERENCE_GEOMETRY = dict(n_layers=32, d=4096, r=6144, B=2, l=256, K=64)
REFERENCE_RATIO = 3.57
REFERENCE_MEFT_FRACTION = 0.56  # MEFT traffic per iteration, in units of the adapter size

SWEEP_COLUMNS = [
    "axis", "value", "status", "em", "comm_total", "host_to_device", "device_to_host", "hidden",
    "union_size", "beta_k", "dedup_ratio", "activated_fraction",
    "router_flops", "expert_scoring_flops", "flops_total",
]


class ConfigError(ValueError):
    pass


@dataclass
class TaskConfig:
    num_facts: int = 2000
    object_len: int = 4
    subject_len: int = 3
    seed: int = 0
    dataset: str | None = None  # path to a dataset file; overrides generation


@dataclass
class SweepConfig:
    kv_pairs: list[int] = field(default_factory=lambda: [32, 256, 2048])
    K: list[int] = field(default_factory=lambda: [1, 64, 2048])
    experts: list[int] = field(default_factory=lambda: [1, 16, 64])
    batch: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    expert_size: int = 32


@dataclass
class RunConfig:
    model: ToyModelConfig = field(default_factory=ToyModelConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    task: TaskConfig = field(default_factory=TaskConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    tier_mode: str = "meft"
    pipeline: bool = False
    eval_every: int = 1
    out: str | None = None
    seed: int | None = None  # overrides model.seed when given

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_run_config(raw: dict) -> RunConfig:
    """Validate a config document; unknown keys anywhere are errors."""
    raw = dict(raw)
    parts = {}
    for key, cls in (("model", ToyModelConfig), ("schedule", TrainSchedule),
                     ("task", TaskConfig), ("sweep", SweepConfig)):
        parts[key] = _build(cls, raw.pop(key, {}), key)
    cfg = _build(RunConfig, {**raw, **parts}, "config")
    if cfg.tier_mode not in ("dense", "meft", "brutal"):
        raise ConfigError(f"tier_mode must be dense, meft or brutal, not {cfg.tier_mode!r}")
    if cfg.seed is not None:
        cfg.model = cfg.model.replace(seed=int(cfg.seed))
    if cfg.task.num_facts < 1 or cfg.task.object_len < 1 or cfg.eval_every < 0:
        raise ConfigError("task sizes must be >= 1 and eval_every >= 0")
    return cfg


def load_run_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return parse_run_config(raw)


def make_dataset(task: TaskConfig, V: int) -> FactDataset:
    if task.dataset:
        try:
            ds = load_dataset(task.dataset)
        except OSError as exc:
            raise ConfigError(f"cannot read dataset {task.dataset}: {exc.strerror}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if ds.V != V:
            raise ConfigError(f"dataset vocabulary {ds.V} does not match model V={V}")
        return ds
    try:
        return gen_fact_dataset(task.num_facts, V, task.object_len, task.seed, task.subject_len)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_task(cfg: RunConfig) -> FactDataset:
    ds = make_dataset(cfg.task, cfg.model.V)
    if cfg.schedule.seq_len < ds.fact_len:
        raise ConfigError(f"seq_len {cfg.schedule.seq_len} is shorter than one fact ({ds.fact_len} tokens)")
    return ds


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def load_schema() -> dict:
    text = resources.files("meft").joinpath(f"schemas/run_report.v{SCHEMA_VERSION}.json").read_text()
    return json.loads(text)


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ValueError("report contains a non-finite number")
    if isinstance(obj, dict):
        for v in obj.values():
            _finite(v)
    elif isinstance(obj, list):
        for v in obj:
            _finite(v)


def run_report(command: str, cfg: RunConfig, res: TrainResult, mode: str,
               meter_file: str | None = None, checkpoint: str | None = None) -> dict:
    last = res.reports[-1] if res.reports else None
    comm = {"host_to_device": 0, "device_to_host": 0, "hidden": 0, "total": 0, "steps": 0, "export": meter_file}
    if res.meter is not None:
        comm.update(res.meter.totals, total=res.meter.total, steps=len(res.meter.steps))
    report = {
        "schema": "meft.run_report",
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "config": cfg.to_dict(),
        "tier_mode": mode,
        "epochs": [{"epoch": r.epoch, "step": r.step, "em": r.em, "train_loss": r.train_loss}
                   for r in res.reports],
        "final_em": last.em if last else 0.0,
        "comm": comm,
        "beta": last.beta if last else [],
        "flops": last.flops if last else {},
        "timings": last.timings if last else {},
        "checkpoint": checkpoint,
    }
    return report


def write_json(path: Path, doc: dict, schema: dict | None = None):
    _finite(doc)
    if schema is not None:
        jsonschema.validate(doc, schema)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


def out_dir(args, cfg: RunConfig | None, command: str) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.out:
        return Path(cfg.out)
    return Path(os.environ.get(OUT_ROOT_ENV, "runs")) / command


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.model = cfg.model.replace(seed=args.seed)
    if getattr(args, "tier_mode", None):
        cfg.tier_mode = args.tier_mode
    if getattr(args, "pipeline", False):
        cfg.pipeline = True
    return cfg


def _train_one(cfg: RunConfig, ds: FactDataset, mode: str, out: Path, command: str,
               schema: dict) -> tuple[TrainResult, dict]:
    trainer = Trainer(cfg.model, ds, cfg.schedule, mode, cfg.pipeline)
    res = trainer.run(eval_every=cfg.eval_every or trainer.schedule.epochs)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.meft"
    save_checkpoint(res.store, ckpt, cfg.model.precision)
    meter_file = None
    if res.meter is not None:
        meter_file = "meter.json"
        write_json(out / meter_file, res.meter.export())
    report = run_report(command, cfg, res, mode, meter_file, ckpt.name)
    write_json(out / "report.json", report, schema)
    return res, report


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    ds = load_task(cfg)
    out = out_dir(args, cfg, "train")
    _, report = _train_one(cfg, ds, cfg.tier_mode, out, "train", load_schema())
    print(f"final EM {report['final_em']:.4f}; report at {out / 'report.json'}")
    return EXIT_OK


def _load_matching_checkpoint(path, model_cfg: ToyModelConfig):
    try:
        return load_checkpoint(path, expect={"d": model_cfg.d, "r": model_cfg.r, "N": model_cfg.N,
                                             "n_layers": model_cfg.L})
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except CheckpointError as exc:
        raise ConfigError(f"checkpoint {path}: {exc}") from None


def cmd_eval(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    ds = load_task(cfg)
    store = _load_matching_checkpoint(args.checkpoint, cfg.model)
    model = ToyModel(cfg.model)
    sparse = cfg.tier_mode != "dense"
    em = eval_em(model, store, ds, sparse, cfg.schedule.batch_size, cfg.schedule.seq_len)
    out = out_dir(args, cfg, "eval")
    doc = {"command": "eval", "checkpoint": str(args.checkpoint), "sparse": sparse,
           "facts": len(ds), "em": em, "step": store.step}
    write_json(out / "eval.json", doc)
    print(f"EM {em:.4f} over {len(ds)} facts")
    return EXIT_OK


def _sweep_point_config(cfg: RunConfig, axis: str, value: int) -> tuple[ToyModelConfig, str]:
    m = cfg.model
    if axis == "kv_pairs":
        return m.replace(r=value, N=experts_for(value, cfg.sweep.expert_size)), cfg.tier_mode
    if axis == "K":
        # K >= r is the unpruned ceiling, trained densely
        return (m.replace(K=m.r), "dense") if value >= m.r else (m.replace(K=value), cfg.tier_mode)
    if axis == "experts":
        return m.replace(N=value), cfg.tier_mode
    raise ConfigError(f"unknown axis {axis!r}")


def _csv_row(axis, value, status, report=None, extra=None) -> dict:
    row = {k: "" for k in SWEEP_COLUMNS}
    row.update(axis=axis, value=value, status=status)
    if report is not None:
        c, f = report["comm"], report["flops"]
        row.update(em=report["final_em"], comm_total=c["total"], host_to_device=c["host_to_device"],
                   device_to_host=c["device_to_host"], hidden=c["hidden"],
                   router_flops=f.get("router_flops", ""), expert_scoring_flops=f.get("expert_scoring_flops", ""),
                   flops_total=f.get("total", ""))
        if report["beta"]:
            for k in ("union_size", "beta_k", "dedup_ratio", "activated_fraction"):
                row[k] = float(np.mean([b[k] for b in report["beta"] if b]))
    row.update(extra or {})
    return row


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    axis = args.axis
    values = list(getattr(cfg.sweep, axis))
    if not values:
        raise ConfigError(f"sweep.{axis} lists no values")
    ds = load_task(cfg)
    out = out_dir(args, cfg, "sweep") / axis
    schema = load_schema()
    rows, failed = [], 0

    if axis == "batch":
        try:
            fr = sweep_batchsize(cfg.model, ds, values, cfg.sweep.seeds, cfg.schedule.seq_len)
            rows = [_csv_row(axis, B, "ok", extra={"activated_fraction": fr[B]}) for B in values]
        except (ValueError, DivergenceError) as exc:
            rows, failed = [_csv_row(axis, B, f"error: {exc}") for B in values], len(values)
    else:
        for value in values:
            try:
                model_cfg, mode = _sweep_point_config(cfg, axis, int(value))
                point = RunConfig(**{**vars(cfg), "model": model_cfg, "tier_mode": mode})
                _, report = _train_one(point, ds, mode, out / str(value), "sweep", schema)
                rows.append(_csv_row(axis, value, "ok", report))
            except (ValueError, DivergenceError) as exc:
                log.error("sweep point %s=%s failed: %s", axis, value, exc)
                rows.append(_csv_row(axis, value, f"error: {exc}"))
                failed += 1

    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"sweep_{axis}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"{len(rows) - failed}/{len(rows)} points ok; CSV at {out / f'sweep_{axis}.csv'}")
    return EXIT_PARTIAL if failed else EXIT_OK


def meter_prediction_matches(meter, n_layers, d, K, B, l) -> bool:
    """Per step, the analytic cost at the measured beta equals the metered total."""
    for i, st in enumerate(meter.steps):
        sizes = [u for lay in st["layers"] for u in lay["union_sizes"]]
        passes = len(sizes) // n_layers
        beta = beta_from_unions(sizes, K)
        want = passes * predicted_cost(n_layers, d, K, B, l, beta, include_backward=True)
        if meter.step_total(i) != want:
            return False
    return True


def reference_geometry_dry_run(activated_fraction: float, dedup_ratio: float) -> list[dict]:
    """Project measured selection statistics onto the large-model geometry."""
    g = REFERENCE_GEOMETRY
    M = g["n_layers"] * 2 * g["d"] * g["r"]
    brutal = brutal_offload_cost(g["n_layers"], g["d"], g["r"])
    rows = []
    for basis, size in (
        ("activated_fraction", activated_fraction * g["r"]),
        ("dedup_ratio", min(g["r"], dedup_ratio * g["B"] * g["l"] * g["K"])),
    ):
        S = max(1, round(size))
        meft = predicted_cost(g["n_layers"], g["d"], g["K"], g["B"], g["l"], Fraction(S, g["K"]),
                              include_backward=True)
        rows.append({
            "basis": basis,
            "union_size": S,
            "meft_elements": int(meft),
            "brutal_elements": brutal,
            "meft_per_M": float(meft / M),
            "ratio": float(brutal / meft),
            "reference_ratio": REFERENCE_RATIO,
            "reference_meft_per_M": REFERENCE_MEFT_FRACTION,
        })
    return rows


def compare(cfg: RunConfig, ds: FactDataset, out: Path | None = None) -> dict:
    """Train the same config in meft and brutal mode and compare metered traffic."""
    schema = load_schema()
    results = {}
    for mode in ("meft", "brutal"):
        if out is not None:
            res, _ = _train_one(cfg, ds, mode, out / mode, "compare", schema)
        else:
            res = Trainer(cfg.model, ds, cfg.schedule, mode, cfg.pipeline).run(eval_every=0)
        results[mode] = res
    m, b = results["meft"].meter, results["brutal"].meter
    c, s = cfg.model, cfg.schedule
    sizes = [u for st in m.steps for lay in st["layers"] for u in lay["union_sizes"]]
    mean_union = float(np.mean(sizes))
    tokens = s.batch_size * s.seq_len
    doc = {
        "command": "compare",
        "config": cfg.to_dict(),
        "steps": len(m.steps),
        "meft_elements": m.total,
        "brutal_elements": b.total,
        "ratio": b.total / m.total,
        "mean_union_size": mean_union,
        "predicted_matches_meter": meter_prediction_matches(m, c.L, c.d, c.K_eff, s.batch_size, s.seq_len),
        "weights_identical": all(
            np.array_equal(x.W_A, y.W_A) and np.array_equal(x.W_B, y.W_B)
            for x, y in zip(results["meft"].store.layers, results["brutal"].store.layers)
        ),
        "reference_geometry": reference_geometry_dry_run(mean_union / c.r, mean_union / (tokens * c.K_eff)),
    }
    return doc


def cmd_compare(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    ds = load_task(cfg)
    out = out_dir(args, cfg, "compare")
    doc = compare(cfg, ds, out)
    write_json(out / "compare.json", doc)
    print(f"brutal/meft element ratio {doc['ratio']:.3f} over {doc['steps']} steps")
    for row in doc["reference_geometry"]:
        print(f"  large-model projection ({row['basis']}): {row['ratio']:.2f}x, "
              f"{row['meft_per_M']:.3f} M per iteration (reference {REFERENCE_RATIO}x, {REFERENCE_MEFT_FRACTION} M)")
    return EXIT_OK


def profile_rows(cfg: RunConfig, store, ds: FactDataset, layer: int = 0):
    """Activation profile of one layer's adapter over the dataset's tokens."""
    model = ToyModel(cfg.model)
    l = cfg.schedule.seq_len
    fpr = l // ds.fact_len
    n_rows = -(-len(ds) // fpr)
    batch = pack(ds, np.resize(np.arange(len(ds)), n_rows * fpr), n_rows, l)
    captured = []

    class Capture(DensePath):
        def forward(self, i, u, base, valid=None):
            if i == layer:
                captured.append(u[(batch.segments >= 0).reshape(-1)])
            return super().forward(i, u, base, valid)

    model.forward(batch, Capture(store))
    return activation_profile(store.layers[layer].adapter, captured)


def cmd_profile(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    ds = load_task(cfg)
    store = _load_matching_checkpoint(args.checkpoint, cfg.model)
    if not 0 <= args.layer < cfg.model.L:
        raise ConfigError(f"layer {args.layer} out of range for L={cfg.model.L}")
    prof = profile_rows(cfg, store, ds, args.layer)
    out = out_dir(args, cfg, "profile")
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"profile_layer{args.layer}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "sorted_mean", "cumulative"])
        for i, (a, c) in enumerate(zip(prof.sorted_means, prof.cumulative)):
            w.writerow([i, repr(float(a)), repr(float(c))])
    print(f"top 20% of neurons carry {prof.mass_in_top(0.2):.3f} of activation mass; CSV at {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meft", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_mode=True):
        sp.add_argument("--config", required=True, help="JSON run config")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="override the model seed")
        if with_mode:
            sp.add_argument("--tier-mode", choices=["dense", "meft", "brutal"])
            sp.add_argument("--pipeline", action="store_true", help="overlap selection with compute")

    common(sub.add_parser("train", help="train and write checkpoint + report"))
    sp = sub.add_parser("eval", help="exact-match of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp = sub.add_parser("sweep", help="one run per axis value plus a CSV")
    common(sp)
    sp.add_argument("--axis", required=True, choices=AXES)
    common(sub.add_parser("compare", help="meft vs brutal-offload traffic"), with_mode=False)
    sp = sub.add_parser("profile", help="activation profile CSV of a checkpoint")
    common(sp, with_mode=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--layer", type=int, default=0)
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "compare": cmd_compare, "profile": cmd_profile}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
