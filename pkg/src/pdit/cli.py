"""``pdit`` command line: gen-data, train, eval, ablate, inspect.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .blocks import LITERAL, PRE_NORM
from .dataset import OfflineDataset, dataset_load, dataset_save, generate_offline_dataset
from .engine import CheckpointError, default_dtype, load_checkpoint, save_checkpoint
from .envs import EnvError, make_env
from .introspection import attention_dump, export_dump, export_heatmap, input_gradient_saliency
from .network import VARIANTS, ConfigError, PDiTConfig, init_params, params_from_arrays
from .trainer import (
    TrainConfig,
    TrainingDiverged,
    batch_from_pairs,
    decision_points,
    default_target_return,
    evaluate,
    params_as_arrays,
    train,
    train_multitask,
)

log = logging.getLogger("pdit")

# model fields a user may set; the rest are read off the environment
MODEL_FIELDS = ("variant", "n_layers", "context", "embed_dim", "n_heads", "patch_size", "ff_mult", "dropout",
                "gamma", "return_scale", "residual_mode", "reembed_tokens", "init_std")
TRAIN_FIELDS = tuple(f.name for f in dataclasses.fields(TrainConfig))

# flag dest -> (section, field)
FLAG_FIELDS = {
    "variant": ("model", "variant"),
    "L": ("model", "n_layers"),
    "K": ("model", "context"),
    "D": ("model", "embed_dim"),
    "heads": ("model", "n_heads"),
    "patch": ("model", "patch_size"),
    "dropout": ("model", "dropout"),
    "return_scale": ("model", "return_scale"),
    "residual": ("model", "residual_mode"),
    "reembed": ("model", "reembed_tokens"),
    "init_std": ("model", "init_std"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "lr": ("train", "lr"),
    "clip": ("train", "clip_norm"),
    "lr_schedule": ("train", "lr_schedule"),
    "warmup": ("train", "warmup_steps"),
    "eval_episodes": ("train", "eval_episodes"),
    "eval_interval": ("train", "eval_interval"),
    "target_return": ("train", "target_return"),
    "seed": ("train", "seed"),
    "steps_per_epoch": ("train", "steps_per_epoch"),
    "float64": ("run", "float64"),
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- run config
@dataclass
class RunConfig:
    """Effective settings for a run plus where each one came from."""

    model: dict[str, Any]
    train: dict[str, Any]
    float64: bool = False
    data: list[str] = field(default_factory=list)
    envs: list[dict[str, Any]] = field(default_factory=list)
    eval_targets: list[float] = field(default_factory=list)
    provenance: dict[str, str] = field(default_factory=dict)

    def pdit_config(self) -> PDiTConfig:
        return PDiTConfig.from_dict(self.model)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        return cls(**{k: d[k] for k in ("model", "train", "float64", "data", "envs", "eval_targets", "provenance") if k in d})

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _model_defaults() -> dict[str, Any]:
    fields = {f.name: f for f in dataclasses.fields(PDiTConfig)}
    out = {k: fields[k].default for k in MODEL_FIELDS}
    out["return_scale"] = None  # resolved from the data
    return out


def _env_fields(ds: OfflineDataset) -> dict[str, Any]:
    env = make_env(ds.env_config)
    d = {
        "modality": env.modality,
        "obs_shape": list(env.obs_shape),
        "action_type": env.action_type,
        "action_dim": int(env.n_actions),
    }
    if env.modality == "hybrid":
        d["vocab_size"] = int(env.vocab_size)
        d["n_words"] = int(env.n_words)
    return d


def auto_return_scale(datasets: list[OfflineDataset]) -> float:
    """Largest absolute episode return, at least 1."""
    peak = max(float(np.abs(ds.returns()).max()) for ds in datasets)
    return float(max(1.0, np.ceil(peak)))


def resolve_run_config(args: argparse.Namespace, datasets: list[OfflineDataset]) -> RunConfig:
    """Merge defaults < config file < flags, recording provenance."""
    model, train_d = _model_defaults(), TrainConfig().to_dict()
    sections = {"model": model, "train": train_d, "run": {"float64": False}}
    prov = {f"model.{k}": "default" for k in model} | {f"train.{k}": "default" for k in train_d}
    prov["run.float64"] = "default"

    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        for name, target in (("model", model), ("train", train_d)):
            allowed = MODEL_FIELDS if name == "model" else TRAIN_FIELDS
            for k, v in (loaded.get(name) or {}).items():
                if k not in allowed:
                    continue  # environment-derived fields are re-read from the data
                if loaded.get("provenance", {}).get(f"{name}.{k}") == "data":
                    continue
                target[k] = v
                prov[f"{name}.{k}"] = "file"
        if "float64" in loaded:
            sections["run"]["float64"] = bool(loaded["float64"])
            prov["run.float64"] = "file"

    for dest, (section, key) in FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        sections[section][key] = value
        prov[f"{section}.{key}"] = "flag"

    if model["return_scale"] is None:
        model["return_scale"] = auto_return_scale(datasets)
        prov["model.return_scale"] = "data"
    for k, v in _env_fields(datasets[0]).items():
        model[k] = v
        prov[f"model.{k}"] = "data"
    tc = TrainConfig(**train_d)
    targets = [
        tc.target_return if tc.target_return is not None else default_target_return(ds, tc.target_multiplier)
        for ds in datasets
    ]
    return RunConfig(
        model=model,
        train=train_d,
        float64=bool(sections["run"]["float64"]),
        data=[str(p) for p in getattr(args, "data", None) or []],
        envs=[ds.env_config for ds in datasets],
        eval_targets=targets,
        provenance=dict(sorted(prov.items())),
    )


# ------------------------------------------------------------------- helpers
def _env_options(pairs: list[str] | None) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--env-opt expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _dtype_scope(float64: bool):
    return default_dtype(np.float64) if float64 else nullcontext()


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_datasets(paths: list[str]) -> list[OfflineDataset]:
    if not paths:
        raise UsageError("at least one --data file is required")
    return [dataset_load(p) for p in paths]


def _load_run(checkpoint: str, config_path: str | None) -> tuple[RunConfig, PDiTConfig, dict[str, np.ndarray]]:
    ckpt = Path(checkpoint)
    cfg_file = Path(config_path) if config_path else ckpt.parent / "config.json"
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    if not cfg_file.exists():
        raise FileNotFoundError(f"run config {cfg_file} not found (pass --config)")
    run = RunConfig.load(cfg_file)
    return run, run.pdit_config(), load_checkpoint(ckpt)


def _train_once(run: RunConfig, datasets: list[OfflineDataset], on_epoch=None):
    config, tc = run.pdit_config(), run.train_config()
    params = init_params(config, tc.seed)
    if len(datasets) == 1:
        return train(params, config, datasets[0], tc, on_epoch)
    return train_multitask(params, config, datasets, tc, on_epoch)


# ------------------------------------------------------------------ commands
def cmd_gen_data(args) -> int:
    env_cfg = {"name": args.env, **_env_options(args.env_opt)}
    make_env(env_cfg)  # validate before the long loop
    ds = generate_offline_dataset(env_cfg, args.episodes, {args.eps: 1.0}, seed=args.seed, gamma=args.gamma)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset_save(ds, out)
    summary = {
        "episodes": len(ds),
        "steps": ds.n_steps(),
        "mean_return": float(ds.returns().mean()),
        "modality": ds.modality,
        "out": str(out),
    }
    print(json.dumps(summary))
    return 0


def cmd_train(args) -> int:
    datasets = _load_datasets(args.data)
    run = resolve_run_config(args, datasets)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", run.to_dict())
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")

    def on_epoch(record):
        with metrics_path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    with _dtype_scope(run.float64):
        result = _train_once(run, datasets, on_epoch)
    save_checkpoint(params_as_arrays(result.params), out / "final.ckpt")
    save_checkpoint(result.best_params, out / "best.ckpt")
    last = result.metrics[-1] if result.metrics else {}
    print(json.dumps({"out": str(out), "epochs": len(result.metrics), "final": last,
                      "best_eval": result.best_eval}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    run, config, arrays = _load_run(args.checkpoint, args.config)
    if args.env:
        env_cfg: Any = {"name": args.env, **_env_options(args.env_opt)}
    else:
        env_cfg = {**run.envs[args.task], **_env_options(args.env_opt)}
    target = args.target_return if args.target_return is not None else run.eval_targets[args.task]
    with _dtype_scope(run.float64):
        params = params_from_arrays(arrays, config)
        res = evaluate(params, config, env_cfg, target, args.episodes, seed=args.seed)
    print(json.dumps(res.to_dict(), sort_keys=True))
    return 0


def format_ablation_table(rows: list[dict[str, Any]]) -> str:
    header = ["variant", "mean", "std", "vs full", "per seed"]
    body = []
    for r in rows:
        rel = "n/a" if r["relative_pct"] is None else f"{r['relative_pct']:+.1f}%"
        body.append([r["variant"], f"{r['mean']:.3f}", f"{r['std']:.3f}", rel,
                     " ".join(f"{v:.3f}" for v in r["per_seed"])])
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def ablation_warnings(rows: list[dict[str, Any]]) -> list[str]:
    by = {r["variant"]: r["mean"] for r in rows}
    out = []
    for other in ("vanilla", "no-dense"):
        if other in by and "full" in by and by["full"] < by[other]:
            out.append(f"full ({by['full']:.3f}) below {other} ({by[other]:.3f})")
    return out


def run_ablation(args, datasets: list[OfflineDataset]) -> dict[str, Any]:
    seeds = args.seeds if args.seeds else list(range(args.n_seeds))
    if len(seeds) < 3:
        raise UsageError("ablation needs at least 3 seeds")
    base = resolve_run_config(args, datasets)
    rows = []
    for variant in VARIANTS:
        per_seed = []
        for seed in seeds:
            run = dataclasses.replace(base, model={**base.model, "variant": variant},
                                      train={**base.train, "seed": int(seed)})
            with _dtype_scope(run.float64):
                res = _train_once(run, datasets)
            evals = [m["eval_mean"] for m in res.metrics if m.get("eval_mean") is not None]
            per_seed.append(float(evals[-1]) if evals else float("nan"))
            log.info("ablate %s seed %s -> %.3f", variant, seed, per_seed[-1])
        rows.append({"variant": variant, "mean": float(np.mean(per_seed)), "std": float(np.std(per_seed)),
                     "per_seed": per_seed, "seeds": [int(s) for s in seeds]})
    full = rows[0]["mean"]
    for r in rows:
        r["relative_pct"] = None if full == 0 else 100.0 * (r["mean"] - full) / abs(full)
    return {"rows": rows, "warnings": ablation_warnings(rows), "config": base.to_dict()}


def cmd_ablate(args) -> int:
    datasets = _load_datasets(args.data)
    report = run_ablation(args, datasets)
    table = format_ablation_table(report["rows"])
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "ablation.json", report)
        (out / "ablation.txt").write_text(table + "\n")
    print(table)
    for w in report["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def sample_context(run: RunConfig, config: PDiTConfig, args):
    """One trajectory window, drawn from ``--data`` or from a fresh expert episode."""
    if args.data:
        ds = dataset_load(args.data)
    else:
        ds = generate_offline_dataset(run.envs[0], 1, seed=args.seed)
    pairs = decision_points(ds)
    rng = np.random.default_rng(args.seed)
    idx = args.index if args.index is not None else int(rng.integers(len(pairs)))
    if not 0 <= idx < len(pairs):
        raise UsageError(f"--index {idx} outside 0..{len(pairs) - 1}")
    return batch_from_pairs(ds, pairs[idx:idx + 1], config).ctx


def cmd_inspect(args) -> int:
    run, config, arrays = _load_run(args.checkpoint, args.config)
    out = Path(args.out)
    with _dtype_scope(run.float64):
        params = params_from_arrays(arrays, config)
        ctx = sample_context(run, config, args)
        dump = attention_dump(params, config, ctx)
        dump.validate()
        sal = input_gradient_saliency(params, config, ctx, target=args.target)
    files = export_dump(dump, out)
    pgm, _ = export_heatmap(sal, out / "saliency.pgm", kind="saliency")
    files.append(pgm)
    print(json.dumps({"files": [str(f) for f in files], "target": sal.target}))
    return 0


# -------------------------------------------------------------------- parser
def _positive(kind=int):
    def parse(text: str):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
        return v
    return parse


def _non_negative_float(text: str) -> float:
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _probability(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return v


def _add_model_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--variant", choices=VARIANTS)
    g.add_argument("--L", type=_positive(), help="layers")
    g.add_argument("--K", type=_positive(), help="history length")
    g.add_argument("--D", type=_positive(), help="embedding width")
    g.add_argument("--heads", type=_positive())
    g.add_argument("--patch", type=_positive(), help="patch side for image observations")
    g.add_argument("--dropout", type=_probability)
    g.add_argument("--return-scale", type=_positive(float))
    g.add_argument("--residual", choices=(PRE_NORM, LITERAL))
    g.add_argument("--reembed", action="store_const", const=True)
    g.add_argument("--init-std", type=_positive(float))
    t = p.add_argument_group("training")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=_positive())
    t.add_argument("--lr", type=_non_negative_float)
    t.add_argument("--clip", type=_positive(float))
    t.add_argument("--lr-schedule", choices=("constant", "cosine"))
    t.add_argument("--warmup", type=int)
    t.add_argument("--eval-episodes", type=int)
    t.add_argument("--eval-interval", type=_positive())
    t.add_argument("--target-return", type=float)
    t.add_argument("--steps-per-epoch", type=_positive())
    t.add_argument("--seed", type=int)
    t.add_argument("--float64", action="store_const", const=True, help="64-bit arithmetic")
    p.add_argument("--config", help="run config JSON (flags override it)")
    p.add_argument("--data", action="append", required=True, help="dataset JSONL; repeat for multi-task")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="roll out the scripted expert into a dataset")
    g.add_argument("--env", required=True)
    g.add_argument("--env-opt", action="append", help="environment field KEY=VALUE")
    g.add_argument("--episodes", type=_positive(), required=True)
    g.add_argument("--eps", type=_probability, default=0.0, help="random-action probability")
    g.add_argument("--gamma", type=_probability, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="return-conditioned supervised training")
    _add_model_train_flags(t)
    t.add_argument("--out", default="run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll out a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="run config (default: config.json beside the checkpoint)")
    e.add_argument("--env")
    e.add_argument("--env-opt", action="append")
    e.add_argument("--task", type=int, default=0, help="which training dataset's env to use")
    e.add_argument("--episodes", type=_positive(), default=50)
    e.add_argument("--target-return", type=float)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare all five variants")
    _add_model_train_flags(a)
    a.add_argument("--n-seeds", type=_positive(), default=3)
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("inspect", help="dump attention and saliency heatmaps")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--config")
    i.add_argument("--data")
    i.add_argument("--index", type=int, help="decision point in --data (default: drawn by --seed)")
    i.add_argument("--target", type=int, help="action id or output component")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pdit: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"pdit: training aborted: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, IndexError, EnvError, CheckpointError, ConfigError) as exc:
        print(f"pdit: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
