"""Command-line entry points: gen-data, train, complete, eval, register.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical failure,
5 degenerate geometry.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import ShapeError
from .data import DatasetSpec, PlyError, XyzParseError, build_dataset, load_manifest, read_cloud, write_ply
from .geometry import DegenerateGeometryError, PointCloud, icp_register, nn_distance_field
from .model import CheckpointError, ModelConfig, init_params, load_config, load_params, save_params
from .training import TrainConfig, complete_instance, evaluate, load_instances, prepare_instance, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_DEGENERATE = 0, 2, 3, 4, 5


class ConfigError(ValueError):
    """Invalid configuration or flags."""


@dataclass
class RunConfig:
    """Model and training settings plus the paths a command reads and writes."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    manifest: str | None = None
    checkpoint: str | None = None
    log: str | None = None
    out: str | None = None

    PATH_KEYS = ("manifest", "checkpoint", "log", "out")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"model", "train", *cls.PATH_KEYS}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            model = ModelConfig.from_dict(d.get("model", {}))
            tr = TrainConfig.from_dict(d.get("train", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(model, tr, **{k: d.get(k) for k in cls.PATH_KEYS})

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            body = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(body, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(body)


def _merge(cfg_obj, overrides: dict):
    """Return a copy of a config dataclass with the non-None overrides applied."""
    d = cfg_obj.to_dict() if hasattr(cfg_obj, "to_dict") else {f.name: getattr(cfg_obj, f.name) for f in fields(cfg_obj)}
    d.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return type(cfg_obj).from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def resolve_config(args) -> RunConfig:
    """Config file first, then flags on top."""
    rc = RunConfig.load(args.config) if args.config else RunConfig()
    model = {
        "variant": getattr(args, "variant", None),
        "num_gat_layers": getattr(args, "gat_layers", None),
    }
    tr = {
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "lr_initial": getattr(args, "lr", None),
        "lr_decay": getattr(args, "lr_decay", None),
        "eval_every": getattr(args, "eval_every", None),
        "cd_variant": getattr(args, "cd_variant", None),
        "seed": args.seed,
        "deterministic": True if args.deterministic else None,
    }
    threads = os.environ.get("GASCN_THREADS")
    if threads is not None:
        try:
            tr["threads"] = max(1, int(threads))
        except ValueError:
            raise ConfigError(f"GASCN_THREADS must be an integer, got {threads!r}") from None
    rc.model = _merge(rc.model, model)
    rc.train = _merge(rc.train, tr)
    for key in RunConfig.PATH_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            setattr(rc, key, str(flag))
    return rc


def _require_file(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"no {what} given")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} {p} does not exist")
    return p


def _require_parent(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"no {what} given")
    p = Path(path)
    if not p.parent.is_dir():
        raise FileNotFoundError(f"directory for {what} {p.parent} does not exist")
    return p


def _emit(report: dict, json_path, text: str) -> None:
    print(text)
    if json_path is not None:
        Path(json_path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    else:
        print(json.dumps(report, sort_keys=True))


def _load_model(checkpoint) -> tuple:
    path = _require_file(checkpoint, "checkpoint")
    cfg = load_config(path)
    return load_params(path, cfg), cfg


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    out = _require_parent(args.out, "output directory")
    try:
        spec = DatasetSpec(n_shapes=args.shapes, views=args.views, gt_points=args.gt_points,
                           scan_points=args.scan_points, resolution=args.resolution)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    seed = 0 if args.seed is None else args.seed
    man = build_dataset(spec, out, seed)
    path = out / "manifest.json"
    _emit({"manifest": str(path), "split_counts": man.split_counts()}, None,
          f"wrote {path} " + " ".join(f"{k}={v}" for k, v in man.split_counts().items()))
    return EXIT_OK


def cmd_train(args) -> int:
    rc = resolve_config(args)
    manifest = load_manifest(_require_file(rc.manifest, "manifest"))
    ckpt = _require_parent(rc.checkpoint, "checkpoint")
    log = _require_parent(rc.log or str(ckpt) + ".metrics.ndjson", "metrics log")
    params = init_params(rc.model, rc.train.seed)
    save_params(params, ckpt, rc.model)
    if rc.train.epochs == 0:
        log.write_text("")
        print(f"wrote initial checkpoint {ckpt}")
        return EXIT_OK
    train_set = load_instances(manifest, "train", rc.train.max_input_points, rc.train.seed)
    val_set = load_instances(manifest, "val", rc.train.max_input_points, rc.train.seed)

    def checkpoint(epoch, p):
        save_params(p, ckpt, rc.model)
        print(f"epoch {epoch}: checkpoint {ckpt}", flush=True)

    result = train(params, train_set, rc.model, rc.train, val_set=val_set, log_path=log, on_eval=checkpoint)
    save_params(result.params, ckpt, rc.model)
    last = result.history[-1]
    _emit({"checkpoint": str(ckpt), "log": str(log), "epochs": len(result.history),
           "final_train_fine_cd": last.mean_fine_cd, "final_val_fine_cd": last.val_fine_cd},
          args.report, f"trained {len(result.history)} epochs; final train fine CD {last.mean_fine_cd:.6f}")
    return EXIT_OK


def cmd_complete(args) -> int:
    params, cfg = _load_model(args.checkpoint)
    out_dir = Path(args.out)
    if not out_dir.is_dir():
        raise FileNotFoundError(f"output directory {out_dir} does not exist")
    inputs = [_require_file(p, "input cloud") for p in args.inputs]
    results, failures = [], 0
    for path in inputs:
        try:
            partial = read_cloud(path)
            if len(partial) < cfg.input_k + 1:
                raise ValueError(f"{len(partial)} points; need at least {cfg.input_k + 1}")
            seed = 0 if args.seed is None else args.seed
            inst = prepare_instance(partial, partial, args.max_points, seed)
            t0 = time.perf_counter()
            out = complete_instance(params, inst, cfg)
            elapsed = time.perf_counter() - t0
        except (ValueError, OSError) as exc:
            print(f"{path}: {exc}", file=sys.stderr)
            failures += 1
            continue
        stem = out_dir / path.stem
        coarse = inst.to_object_frame(out.coarse.data)
        write_ply(PointCloud(coarse), f"{stem}_coarse.ply")
        write_ply(PointCloud(inst.to_object_frame(out.fine.data)), f"{stem}_fine.ply")
        if out.normals is not None:
            write_ply(PointCloud(coarse, normals=out.normals.data), f"{stem}_coarse_normals.ply")
        results.append({"input": str(path), "n_coarse": int(coarse.shape[0]),
                        "n_fine": int(out.fine.shape[0]), "seconds": elapsed})
    _emit({"completed": results, "failed": failures}, args.report,
          f"completed {len(results)} of {len(inputs)} inputs")
    return EXIT_OK if failures == 0 else EXIT_IO


def cmd_eval(args) -> int:
    params, cfg = _load_model(args.checkpoint)
    rc = resolve_config(args)
    manifest = load_manifest(_require_file(rc.manifest, "manifest"))
    dump = Path(args.dump_distance_fields) if args.dump_distance_fields else None
    if dump is not None and not dump.is_dir():
        raise FileNotFoundError(f"distance field directory {dump} does not exist")
    instances = load_instances(manifest, args.split, rc.train.max_input_points, rc.train.seed)
    fines = {}

    def predict(inst):
        key = (inst.shape_id, inst.view)
        if key not in fines:
            fines[key] = inst.to_object_frame(complete_instance(params, inst, cfg).fine.data)
        return fines[key]

    report = {"split": args.split, "n_instances": len(instances), "scale": 1000}
    for variant in ("unsquared", "squared"):
        r = evaluate(params, instances, cfg, variant, predict=predict)
        report[variant] = {"overall": 1000 * r.overall,
                           "per_category": {c: 1000 * v for c, v in r.per_category.items()},
                           "counts": r.counts}
    if dump is not None:
        for inst in instances:
            field_cloud = nn_distance_field(predict(inst), inst.gt)
            write_ply(field_cloud, dump / f"shape_{inst.shape_id:04d}_{inst.view}_dist.ply")
    lines = [f"CD x1e3 ({args.split}, {len(instances)} instances)"]
    for variant in ("unsquared", "squared"):
        cats = " ".join(f"{c}={v:.3f}" for c, v in report[variant]["per_category"].items())
        lines.append(f"  {variant}: overall={report[variant]['overall']:.3f} {cats}")
    _emit(report, args.report, "\n".join(lines))
    return EXIT_OK


def compare_registration(params, cfg: ModelConfig, view_a, view_b, max_points: int = 3000, seed: int = 0,
                         max_iters: int = 50) -> dict:
    """ICP of ``view_b`` onto ``view_a``, once on the raw partials and once on their completions."""
    a, b = PointCloud(view_a.points if isinstance(view_a, PointCloud) else view_a), \
        PointCloud(view_b.points if isinstance(view_b, PointCloud) else view_b)
    completed = []
    for cloud in (a, b):
        inst = prepare_instance(cloud, cloud, max_points, seed)
        completed.append(inst.to_object_frame(complete_instance(params, inst, cfg).fine.data))
    raw_t, raw_trace = icp_register(b.points, a.points, max_iters=max_iters)
    comp_t, comp_trace = icp_register(completed[1], completed[0], max_iters=max_iters)
    return {
        "partial": {"mse": raw_trace[-1], "iterations": len(raw_trace) - 1, **raw_t.to_dict()},
        "completed": {"mse": comp_trace[-1], "iterations": len(comp_trace) - 1, **comp_t.to_dict()},
    }


def cmd_register(args) -> int:
    params, cfg = _load_model(args.checkpoint)
    a = read_cloud(_require_file(args.view_a, "view"))
    b = read_cloud(_require_file(args.view_b, "view"))
    seed = 0 if args.seed is None else args.seed
    report = compare_registration(params, cfg, a, b, args.max_points, seed)
    _emit(report, args.report, f"ICP MSE partial={report['partial']['mse']:.6e} "
                               f"completed={report['completed']['mse']:.6e}")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gascn", description="Graph-attention point cloud shape completion")
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON run config; flags override its values")
    shared.add_argument("--seed", type=int, help="random seed")
    shared.add_argument("--deterministic", action="store_true", help="sequential, bit-reproducible execution")
    shared.add_argument("--report", help="write the JSON report here instead of stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[shared], help="generate a synthetic dataset")
    p.add_argument("--shapes", type=int, default=100)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--gt-points", type=int, default=2304)
    p.add_argument("--scan-points", type=int, default=2048)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[shared], help="train a model")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint", help="checkpoint path (rewritten at every evaluation)")
    p.add_argument("--log", help="per-epoch NDJSON metrics (default: <checkpoint>.metrics.ndjson)")
    p.add_argument("--variant", choices=["full", "model_a", "model_b"])
    p.add_argument("--gat-layers", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--cd-variant", choices=["unsquared", "squared"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("complete", parents=[shared], help="complete partial clouds")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="existing output directory")
    p.add_argument("--max-points", type=int, default=3000)
    p.add_argument("inputs", nargs="+", help="PLY or XYZ files")
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("eval", parents=[shared], help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--dump-distance-fields", metavar="DIR", help="write fine clouds with NN distance as quality")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("register", parents=[shared], help="compare ICP on partials and on completions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--max-points", type=int, default=3000)
    p.add_argument("view_a")
    p.add_argument("view_b")
    p.set_defaults(func=cmd_register)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, PlyError, XyzParseError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DegenerateGeometryError as exc:
        print(f"degenerate geometry: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())
