"""Command-line surface tying pretraining, tuning, sweeps, and analysis together.

Every run resolves its configuration (file defaults plus flag overrides),
writes its artifacts atomically into the output directory, and finishes
with a manifest (resolved config, seed, build id, artifact hashes) that
pins the run for bit-identical replay.

Exit codes: 0 success, 1 configuration error, 2 selftest failure, 3 I/O
or artifact-format error. `VFPT_THREADS` caps the worker count used for
grid cells and sweep runs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import analysis, io as vio, selftest
from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .data import SOURCE_ORIENTATION, TaskSpec, normalize
from .errors import ConfigError, FormatError
from .prompts import PromptConfig, PromptedClassifier
from .training import (TrainConfig, Tuner, grid_search, prepare_task, pretrain,
                       timing_harness)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def worker_count():
    raw = os.environ.get("VFPT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"VFPT_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"VFPT_THREADS must be >= 1, got {n}")
    return n


# ---------------------------------------------------------------------------
# config assembly

def backbone_config(cfg):
    return BackboneConfig(**cfg["backbone"])


def prompt_config(cfg):
    section = dict(cfg["prompt"])
    depth = section.pop("depth_set")
    depth_set = tuple(int(x) for x in depth.split(",")) if depth.strip() else None
    return PromptConfig(depth_set=depth_set, **section)


def train_config(cfg):
    section = dict(cfg["train"])
    section["lr_grid"] = vio.parse_number_list(section["lr_grid"], float)
    section["wd_grid"] = vio.parse_number_list(section["wd_grid"], float)
    section["seeds"] = vio.parse_number_list(section["seeds"], int)
    return TrainConfig(**section)


def task_specs(cfg):
    data = cfg["data"]
    source = TaskSpec(
        name="source", kind=SOURCE_ORIENTATION,
        num_classes=cfg["backbone"]["num_classes_pretrain"],
        train_count=data["train_count"], val_count=data["val_count"],
        test_count=data["test_count"], image_size=data["image_size"],
        noise_std=data["source_noise_std"], seed=data["source_seed"])
    target = TaskSpec(
        name=data["name"], kind=data["kind"], num_classes=data["num_classes"],
        train_count=data["train_count"], val_count=data["val_count"],
        test_count=data["test_count"], image_size=data["image_size"],
        noise_std=data["noise_std"], seed=data["seed"])
    return source, target


def _load_resolved(args):
    cfg = vio.load_config(args.config) if args.config else vio.default_config()
    if getattr(args, "seed", None) is not None:
        cfg["run"]["seed"] = args.seed
    if getattr(args, "out_dir", None):
        cfg["run"]["out_dir"] = args.out_dir
    if getattr(args, "backbone", None):
        cfg["run"]["backbone_checkpoint"] = args.backbone
    if getattr(args, "tuned", None):
        cfg["run"]["tuned_checkpoint"] = args.tuned
    return cfg


# ---------------------------------------------------------------------------
# checkpoint helpers

_META_KEYS = ("image_size", "patch_size", "channels", "depth", "width", "heads",
              "mlp_ratio", "num_classes_pretrain")


def save_backbone(path, backbone: Backbone, stats):
    named = {}
    for key in _META_KEYS:
        named[f"meta.{key}"] = np.array(float(getattr(backbone.cfg, key)))
    named["stats.mean"] = np.asarray(stats[0], dtype=np.float64)
    named["stats.std"] = np.asarray(stats[1], dtype=np.float64)
    for name, tensor in backbone.params.items():
        named[f"param.{name}"] = tensor.data
    vio.save(path, named)


def load_backbone(path):
    try:
        named = vio.load(path)
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}")
    try:
        cfg = BackboneConfig(**{key: int(named[f"meta.{key}"]) for key in _META_KEYS})
        stats = (named["stats.mean"], named["stats.std"])
        backbone = Backbone(cfg, seed=0)
        backbone.load_state({name[len("param."):]: arr for name, arr in named.items()
                             if name.startswith("param.")})
    except KeyError as exc:
        raise FormatError(f"checkpoint {path} is missing entry {exc}")
    backbone.freeze()
    return backbone, stats


def save_tuned(path, model: PromptedClassifier):
    named = dict(model.named_state())
    vio.save(path, named)


def load_tuned_into(model: PromptedClassifier, path):
    named = vio.load(path)
    own = model.named_state()
    missing = set(own) - set(named)
    if missing:
        raise FormatError(f"tuned checkpoint missing tensors {sorted(missing)}")
    for name, tensor in own.items():
        if named[name].shape != tensor.data.shape:
            raise FormatError(
                f"tensor {name!r} shape {named[name].shape} != {tensor.data.shape}")
        tensor.data[...] = named[name]


def _require_backbone(cfg):
    path = cfg["run"]["backbone_checkpoint"]
    if not path:
        raise ConfigError("a backbone checkpoint is required (--backbone or "
                          "[run] backbone_checkpoint)")
    return load_backbone(path)


def _build_tuner(cfg, seed=None, alpha=None):
    backbone, stats = _require_backbone(cfg)
    _, target_spec = task_specs(cfg)
    task = prepare_task(target_spec, stats=stats)
    pcfg = prompt_config(cfg)
    if alpha is not None:
        pcfg = replace(pcfg, alpha=float(alpha))
    tcfg = train_config(cfg)
    run_seed = cfg["run"]["seed"] if seed is None else seed
    return Tuner(backbone, task, pcfg, tcfg, seed=run_seed), task


# ---------------------------------------------------------------------------
# subcommands

def cmd_pretrain(args):
    cfg = _load_resolved(args)
    out = cfg["run"]["out_dir"]
    source_spec, _ = task_specs(cfg)
    task = prepare_task(source_spec)
    backbone, record = pretrain(task, backbone_config(cfg), train_config(cfg),
                                seed=cfg["run"]["seed"],
                                log=print if args.verbose else None)
    ckpt = os.path.join(out, "backbone.ckpt")
    save_backbone(ckpt, backbone, (task.mean, task.std))
    csv_path = os.path.join(out, "pretrain.csv")
    vio.write_csv(csv_path, ["epoch", "train_loss", "val_accuracy"],
                  [(e + 1, l, a) for e, (l, a) in
                   enumerate(zip(record.train_loss, record.val_accuracy))])
    vio.write_manifest(os.path.join(out, "manifest.json"), "pretrain", cfg,
                       cfg["run"]["seed"],
                       {"backbone.ckpt": ckpt, "pretrain.csv": csv_path})
    print(f"pretrained backbone: val acc "
          f"{record.val_accuracy[-1] if record.val_accuracy else float('nan'):.4f} "
          f"-> {ckpt}")
    return 0


def cmd_tune(args):
    cfg = _load_resolved(args)
    out = cfg["run"]["out_dir"]
    tuner, _ = _build_tuner(cfg)
    record = tuner.run(log=print if args.verbose else None)
    ckpt = os.path.join(out, "tuned.ckpt")
    save_tuned(ckpt, tuner.model)
    csv_path = os.path.join(out, "run.csv")
    vio.write_csv(csv_path, ["epoch", "train_loss", "val_accuracy"],
                  [(e + 1, l, a) for e, (l, a) in
                   enumerate(zip(record.train_loss, record.val_accuracy))])
    summary = {
        "val_accuracy": record.final_val_accuracy(),
        "test_accuracy": record.test_accuracy,
        "lr": record.lr,
        "weight_decay": record.weight_decay,
        "seed": record.seed,
        "diverged": record.diverged,
        "parameters": tuner.model.parameter_summary(),
    }
    summary_path = os.path.join(out, "summary.json")
    vio.atomic_write_text(summary_path, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    vio.write_manifest(os.path.join(out, "manifest.json"), "tune", cfg, record.seed,
                       {"tuned.ckpt": ckpt, "run.csv": csv_path,
                        "summary.json": summary_path})
    print(f"tuned: val acc {summary['val_accuracy']:.4f} "
          f"test acc {summary['test_accuracy']:.4f} -> {ckpt}")
    return 0


def cmd_eval(args):
    cfg = _load_resolved(args)
    out = cfg["run"]["out_dir"]
    tuner, _ = _build_tuner(cfg)
    tuned_path = cfg["run"]["tuned_checkpoint"]
    if not tuned_path:
        raise ConfigError("eval needs --tuned or [run] tuned_checkpoint")
    load_tuned_into(tuner.model, tuned_path)
    val_acc, val_loss = tuner.evaluate("val")
    test_acc, test_loss = tuner.evaluate("test")
    result = {"val_accuracy": val_acc, "val_loss": val_loss,
              "test_accuracy": test_acc, "test_loss": test_loss}
    path = os.path.join(out, "eval.json")
    vio.atomic_write_text(path, json.dumps(result, indent=2, sort_keys=True) + "\n")
    vio.write_manifest(os.path.join(out, "manifest.json"), "eval", cfg,
                       cfg["run"]["seed"], {"eval.json": path})
    print(json.dumps(result, sort_keys=True))
    return 0


def _sweep_seeds(raw):
    if "," in raw:
        return tuple(int(x) for x in raw.split(","))
    count = int(raw)
    if count < 1:
        raise ConfigError(f"--seeds must name at least one seed, got {raw!r}")
    return tuple(range(count))


def _sweep_cell(payload):
    (cfg, alpha, seed) = payload
    tuner, _ = _build_tuner(cfg, seed=seed, alpha=alpha)
    record = tuner.run()
    return {"alpha": float(alpha), "seed": int(seed),
            "val_accuracy": record.final_val_accuracy(),
            "test_accuracy": record.test_accuracy}


def cmd_sweep_alpha(args):
    cfg = _load_resolved(args)
    out = cfg["run"]["out_dir"]
    alphas = [float(x) for x in args.alphas.split(",")]
    seeds = _sweep_seeds(args.seeds)
    m_total = cfg["prompt"]["prompts_per_layer"]
    for alpha in alphas:
        if abs(alpha * m_total - round(alpha * m_total)) > 1e-9:
            raise ConfigError(
                f"alpha {alpha} does not give an integer prompt count for M={m_total}")
    jobs = [(cfg, alpha, seed) for alpha in alphas for seed in seeds]
    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_cell, jobs))
    else:
        rows = [_sweep_cell(job) for job in jobs]
    csv_path = os.path.join(out, "sweep.csv")
    vio.write_csv(csv_path, ["alpha", "seed", "val_accuracy", "test_accuracy"],
                  [(r["alpha"], r["seed"], r["val_accuracy"], r["test_accuracy"])
                   for r in rows])
    summary_rows = []
    for alpha in alphas:
        vals = [r["val_accuracy"] for r in rows if r["alpha"] == alpha]
        summary_rows.append((alpha, float(np.mean(vals)),
                             float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
                             len(vals)))
    summary_path = os.path.join(out, "sweep_summary.csv")
    vio.write_csv(summary_path,
                  ["alpha", "mean_val_accuracy", "std_val_accuracy", "runs"],
                  summary_rows)
    vio.write_manifest(os.path.join(out, "manifest.json"), "sweep-alpha", cfg,
                       cfg["run"]["seed"],
                       {"sweep.csv": csv_path, "sweep_summary.csv": summary_path},
                       extra={"alphas": alphas, "seeds": list(seeds)})
    for row in summary_rows:
        print(f"alpha {row[0]}: mean val acc {row[1]:.4f} +- {row[2]:.4f} ({row[3]} runs)")
    return 0


def _grid_cell(payload):
    (cfg, lr, wd, seed) = payload
    tuner, _ = _build_tuner(cfg, seed=seed)
    tuner.train_cfg = replace(tuner.train_cfg, base_lr=lr, weight_decay=wd)
    record = tuner.run()
    return {"lr": lr, "wd": wd, "seed": seed, "diverged": record.diverged,
            "val_accuracy": record.final_val_accuracy()}


def cmd_grid_search(args):
    cfg = _load_resolved(args)
    out = cfg["run"]["out_dir"]
    tcfg = train_config(cfg)
    seed = cfg["run"]["seed"]
    jobs = [(cfg, lr, wd, seed) for lr in tcfg.lr_grid for wd in tcfg.wd_grid]
    if not jobs:
        raise ConfigError("grid search needs nonempty lr_grid and wd_grid")
    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_grid_cell, jobs))
    else:
        rows = [_grid_cell(job) for job in jobs]
    alive = [r for r in rows if not r["diverged"]]
    if not alive:
        raise ConfigError("every grid cell diverged")
    best = min(alive, key=lambda r: (-r["val_accuracy"], r["lr"], r["wd"]))
    csv_path = os.path.join(out, "grid.csv")
    vio.write_csv(csv_path, ["lr", "wd", "val_accuracy", "diverged"],
                  [(r["lr"], r["wd"], r["val_accuracy"], int(r["diverged"]))
                   for r in rows])
    best_path = os.path.join(out, "best.json")
    vio.atomic_write_text(best_path, json.dumps(best, indent=2, sort_keys=True) + "\n")
    vio.write_manifest(os.path.join(out, "manifest.json"), "grid-search", cfg, seed,
                       {"grid.csv": csv_path, "best.json": best_path})
    print(f"best cell: lr={best['lr']} wd={best['wd']} "
          f"val acc {best['val_accuracy']:.4f}")
    return 0


def _analysis_probe(cfg):
    tuner, _ = _build_tuner(cfg)
    tuned_path = cfg["run"]["tuned_checkpoint"]
    if not tuned_path:
        raise ConfigError("analysis commands need --tuned or [run] tuned_checkpoint")
    load_tuned_into(tuner.model, tuned_path)
    return tuner, cfg["analysis"]


def cmd_landscape(args):
    cfg = _load_resolved(args)
    out = cfg["run"]["out_dir"]
    tuner, a = _analysis_probe(cfg)
    tokens, labels = tuner._tokens["train"]
    probe = analysis.ModelProbe(tuner.model, tokens, labels,
                                subset=a["subset"], seed=a["direction_seed"])
    dir1, dir2 = analysis.random_directions(probe.space, seed=a["direction_seed"])
    grid = analysis.landscape(probe, dir1, dir2, resolution=a["resolution"],
                              span=a["span"])
    csv_path = os.path.join(out, "landscape.csv")
    vio.write_grid_csv(csv_path, grid)
    pgm_path = os.path.join(out, "landscape.pgm")
    vio.write_pgm(pgm_path, grid.values["value"])
    center = grid.values["value"][a["resolution"] // 2, a["resolution"] // 2]
    vio.write_manifest(os.path.join(out, "manifest.json"), "landscape", cfg,
                       cfg["run"]["seed"],
                       {"landscape.csv": csv_path, "landscape.pgm": pgm_path},
                       extra={"center_loss": float(center)})
    print(f"landscape {a['resolution']}x{a['resolution']} center loss {center:.6f}")
    return 0


def cmd_hessian_map(args):
    cfg = _load_resolved(args)
    out = cfg["run"]["out_dir"]
    tuner, a = _analysis_probe(cfg)
    tokens, labels = tuner._tokens["train"]
    probe = analysis.ModelProbe(tuner.model, tokens, labels,
                                subset=a["map_subset"], seed=a["direction_seed"])
    dir1, dir2 = analysis.random_directions(probe.space, seed=a["direction_seed"])
    grid, fraction = analysis.convexity_map(
        probe, dir1, dir2, resolution=a["map_resolution"], span=a["span"],
        tau=a["tau"], tol=a["eig_tol"], maxiter=a["eig_maxiter"],
        seed=a["direction_seed"])
    csv_path = os.path.join(out, "hessian.csv")
    vio.write_grid_csv(csv_path, grid)
    pgm_path = os.path.join(out, "hessian.pgm")
    ratio = grid.values["ratio"]
    vio.write_pgm(pgm_path, np.nan_to_num(ratio, nan=np.nanmin(ratio) if
                                          np.isfinite(ratio).any() else 0.0))
    vio.write_manifest(os.path.join(out, "manifest.json"), "hessian-map", cfg,
                       cfg["run"]["seed"],
                       {"hessian.csv": csv_path, "hessian.pgm": pgm_path},
                       extra={"convex_fraction": fraction, "tau": a["tau"]})
    print(f"convex fraction {fraction:.4f} (tau={a['tau']})")
    return 0


def cmd_attention(args):
    cfg = _load_resolved(args)
    out = cfg["run"]["out_dir"]
    tuner, a = _analysis_probe(cfg)
    index = a["attention_index"]
    test = tuner.task.splits.test
    if not 0 <= index < len(test):
        raise ConfigError(f"attention_index {index} outside test split of {len(test)}")
    image = normalize(test.images[index], tuner.task.mean, tuner.task.std)
    matrix, segments, prompt_mass = analysis.attention_export(tuner.model, image)
    csv_path = os.path.join(out, "attention.csv")
    lines = ["# segments: " + ", ".join(f"{k}={lo}:{hi}" for k, (lo, hi) in
                                        segments.items())]
    for row in matrix:
        lines.append(",".join(vio.format_float(v) for v in row))
    vio.atomic_write_text(csv_path, "\n".join(lines) + "\n")
    pgm_path = os.path.join(out, "attention.pgm")
    vio.write_pgm(pgm_path, matrix)
    vio.write_manifest(os.path.join(out, "manifest.json"), "attention", cfg,
                       cfg["run"]["seed"],
                       {"attention.csv": csv_path, "attention.pgm": pgm_path},
                       extra={"prompt_attention_mass": prompt_mass,
                              "segments": {k: list(v) for k, v in segments.items()}})
    print(f"attention matrix {matrix.shape[0]}x{matrix.shape[1]}, "
          f"prompt column mass {prompt_mass:.4f}")
    return 0


def cmd_timing(args):
    cfg = _load_resolved(args)
    out = cfg["run"]["out_dir"]
    backbone, stats = _require_backbone(cfg)
    _, target_spec = task_specs(cfg)
    task = prepare_task(target_spec, stats=stats)
    result = timing_harness(backbone, task, prompt_config(cfg), train_config(cfg),
                            seed=cfg["run"]["seed"])
    path = os.path.join(out, "timing.json")
    vio.atomic_write_text(path, json.dumps(result, indent=2, sort_keys=True) + "\n")
    vio.write_manifest(os.path.join(out, "manifest.json"), "timing", cfg,
                       cfg["run"]["seed"], {"timing.json": path})
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_selftest(args):
    ok = selftest.run_all(log=print)
    return 0 if ok else 2


def build_parser():
    parser = _Parser(prog="vfpt", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, backbone=False, tuned=False):
        p.add_argument("--config", help="run configuration file")
        p.add_argument("--out-dir", dest="out_dir", help="artifact directory")
        p.add_argument("--seed", type=int, help="run seed override")
        p.add_argument("--verbose", action="store_true")
        if backbone:
            p.add_argument("--backbone", help="frozen backbone checkpoint")
        if tuned:
            p.add_argument("--tuned", help="tuned checkpoint")

    common(sub.add_parser("pretrain", help="train and freeze a backbone"))
    common(sub.add_parser("tune", help="prompt-tune on the target task"),
           backbone=True)
    common(sub.add_parser("eval", help="evaluate a tuned checkpoint"),
           backbone=True, tuned=True)
    p = sub.add_parser("sweep-alpha", help="accuracy curve over Fourier fractions")
    common(p, backbone=True)
    p.add_argument("--alphas", default="0.0,0.5,1.0",
                   help="comma-separated Fourier fractions")
    p.add_argument("--seeds", default="5",
                   help="seed count, or comma-separated explicit seeds")
    common(sub.add_parser("grid-search", help="learning-rate/weight-decay search"),
           backbone=True)
    common(sub.add_parser("landscape", help="loss landscape over two directions"),
           backbone=True, tuned=True)
    common(sub.add_parser("hessian-map", help="extreme-eigenvalue ratio map"),
           backbone=True, tuned=True)
    common(sub.add_parser("attention", help="export last-layer attention"),
           backbone=True, tuned=True)
    common(sub.add_parser("timing", help="batch-time and memory harness"),
           backbone=True)
    sub.add_parser("selftest", help="run the built-in verification suites")
    return parser


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "tune": cmd_tune,
    "eval": cmd_eval,
    "sweep-alpha": cmd_sweep_alpha,
    "grid-search": cmd_grid_search,
    "landscape": cmd_landscape,
    "hessian-map": cmd_hessian_map,
    "attention": cmd_attention,
    "timing": cmd_timing,
    "selftest": cmd_selftest,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
