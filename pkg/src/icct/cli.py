"""Command-line interface: ``icct train|eval|sweep|verify|crispify|export``.

Exit codes: 0 success (or verified), 2 usage or configuration error,
3 runtime failure, 4 verification violated.  ``ICCT_LOG`` in
{error, warn, info, debug} sets log verbosity (default ``warn``).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import export
from .envs import ENVIRONMENTS, TrainingDivergedError, make_env
from .export import ModelFileError
from .model import (
    DegenerateNodeError,
    IcctConfig,
    IcctModel,
    InvalidModeError,
    count_params,
    count_trainable,
    post_hoc_crispify,
    to_simple_form,
)
from .policy import MlpActor, mlp_baseline_hidden
from .sac import SacConfig, evaluate, train, write_metrics_csv
from .verify import QueryError, parse_query, run_query

log = logging.getLogger("icct")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VIOLATED = 0, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
ACTORS = ("tree", "mlp_max", "mlp_upper", "mlp_lower")


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


# --------------------------------------------------------------------------
# run configuration


@dataclasses.dataclass
class RunConfig:
    env: str | None = None
    actor: str = "tree"
    variant: str = "icct"
    leaves: int = 8
    leaf_features: int | None = None
    argmax_mode: str = "straight_through"
    gumbel_tau: float = 1.0
    l1_leaf_penalty: float = 0.0
    seeds: tuple = (0,)
    out: str | None = None
    sac: SacConfig = dataclasses.field(default_factory=SacConfig)

    def tree_config(self, spec) -> IcctConfig:
        return IcctConfig(
            self.leaves, spec.observation_dim, spec.action_dim, leaf_sparsity=self.leaf_features,
            variant=self.variant, argmax_mode=self.argmax_mode, gumbel_tau=self.gumbel_tau,
            l1_leaf_penalty=self.l1_leaf_penalty,
        )

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "sac"}
        d["seeds"] = list(self.seeds)
        sac = dataclasses.asdict(self.sac)
        sac["critic_hidden"] = list(sac["critic_hidden"])
        d.update(sac)
        return d


RUN_KEYS = {f.name for f in dataclasses.fields(RunConfig)} - {"sac"}
SAC_KEYS = {f.name for f in dataclasses.fields(SacConfig)} - {"seed"}


def _parse_seeds(v) -> tuple:
    if isinstance(v, str):
        try:
            v = [int(s) for s in v.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"seeds must be comma-separated integers, got {v!r}") from None
    if isinstance(v, int):
        v = [v]
    if not v or not all(isinstance(s, int) and not isinstance(s, bool) for s in v):
        raise UsageError("seeds must be a non-empty list of integers")
    return tuple(v)


def resolve_config(file_values: dict, overrides: dict) -> RunConfig:
    """Merge a JSON config with flag overrides (flags win) and validate everything."""
    if not isinstance(file_values, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(file_values) - RUN_KEYS - SAC_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    merged = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    run = {k: merged[k] for k in RUN_KEYS if k in merged}
    sac = {k: merged[k] for k in SAC_KEYS if k in merged}
    if "seeds" in run:
        run["seeds"] = _parse_seeds(run["seeds"])
    if "critic_hidden" in sac:
        sac["critic_hidden"] = tuple(sac["critic_hidden"])
    if run.get("env") is None:
        raise UsageError("an environment is required (--env or \"env\" in the config)")
    try:
        cfg = RunConfig(**run, sac=SacConfig(**sac))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    if cfg.env not in ENVIRONMENTS:
        raise UsageError(f"unknown environment {cfg.env!r}; choose from {sorted(ENVIRONMENTS)}")
    if cfg.actor not in ACTORS:
        raise UsageError(f"unknown actor {cfg.actor!r}; choose from {list(ACTORS)}")
    try:
        cfg.tree_config(make_env(cfg.env, **({"warmup_steps": 0} if cfg.env == "ring" else {})).spec)
    except ValueError as exc:
        raise UsageError(f"invalid tree configuration: {exc}") from None
    return cfg


def build_actor(cfg: RunConfig, spec, seed: int):
    tree_cfg = cfg.tree_config(spec)
    rng = np.random.default_rng(seed)
    if cfg.actor == "tree":
        return IcctModel.init(
            tree_cfg, rng, feature_names=list(spec.feature_names) or None, action_names=list(spec.action_names) or None
        )
    return MlpActor(spec.observation_dim, spec.action_dim, mlp_baseline_hidden(cfg.actor, tree_cfg), rng)


def _load_model(path):
    if not Path(path).is_file():
        raise UsageError(f"model file not found: {path}")
    try:
        return export.load(path)
    except ModelFileError as exc:
        raise UsageError(f"cannot load {path}: {exc}") from None


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return _jsonable(x.item())
    return x


# --------------------------------------------------------------------------
# commands


def train_one(cfg: RunConfig, seed: int, out: Path | None):
    env = make_env(cfg.env)
    actor = build_actor(cfg, env.spec, seed)
    result = train(actor, env, cfg.sac.replace(seed=seed))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(result.metrics, out / "metrics.csv")
        with open(out / "evaluations.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "mean_return", "stderr"])
            w.writerows([[s, repr(m), repr(e)] for s, m, e in result.evaluations])
        export.save(result.best_actor, out / "best.json")
        export.save(result.actor, out / "final.json")
    return result


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out = Path(cfg.out) if cfg.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
    for seed in cfg.seeds:
        result = train_one(cfg, seed, None if out is None else out / f"seed_{seed}")
        print(f"seed {seed}: best evaluation return {result.best_return:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    if args.env not in ENVIRONMENTS:
        raise UsageError(f"unknown environment {args.env!r}")
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    res = evaluate(model, make_env(args.env), args.episodes, args.seed, mode=args.mode)
    print(f"return {res.mean:.2f} +- {res.stderr:.2f} over {len(res.returns)} episodes")
    for i, r in enumerate(res.returns):
        print(f"episode {i}: {r:.2f}")
    if args.json:
        Path(args.json).write_text(json.dumps(_jsonable({"mean": res.mean, "stderr": res.stderr, "returns": res.returns, "summaries": res.summaries}), indent=1) + "\n")
    return EXIT_OK


SWEEP_COLUMNS = (
    "axis", "value", "variant", "num_leaves", "leaf_sparsity", "count_params", "count_trainable",
    "mean_return", "stderr", "seeds",
)


def sweep_configs(base: RunConfig, axis: str, values, input_dim: int):
    """Run configurations along the leaves or controller-features axis."""
    for v in values:
        if axis == "leaves":
            yield v, dataclasses.replace(base, leaves=v)
        else:
            if not 0 <= v <= input_dim:
                raise UsageError(f"feature count {v} outside [0, {input_dim}]")
            variant = "icct_static" if v == 0 else ("icct_complete" if v == input_dim else "icct")
            yield v, dataclasses.replace(base, variant=variant, leaf_features=None if variant != "icct" else v)


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    spec = make_env(cfg.env, **({"warmup_steps": 0} if cfg.env == "ring" else {})).spec
    if args.axis == "features" and args.values == "all":
        values = list(range(spec.observation_dim + 1))
    else:
        try:
            values = [int(v) for v in args.values.split(",")]
        except ValueError:
            raise UsageError("--values must be comma-separated integers") from None
    plans = list(sweep_configs(cfg, args.axis, values, spec.observation_dim))
    for _, run in plans:
        try:
            run.tree_config(spec)
        except ValueError as exc:
            raise UsageError(f"invalid sweep point: {exc}") from None
    out = Path(cfg.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value, run in plans:
        tree_cfg = run.tree_config(spec)
        bests = []
        for seed in run.seeds:
            sub = out / f"{args.axis}_{value}" / f"seed_{seed}"
            bests.append(train_one(run, seed, sub if cfg.out else None).best_return)
        bests = np.array(bests)
        stderr = float(bests.std(ddof=1) / np.sqrt(len(bests))) if len(bests) > 1 else 0.0
        rows.append({
            "axis": args.axis, "value": value, "variant": tree_cfg.variant, "num_leaves": tree_cfg.num_leaves,
            "leaf_sparsity": tree_cfg.leaf_sparsity, "count_params": count_params(tree_cfg),
            "count_trainable": count_trainable(tree_cfg), "mean_return": repr(float(bests.mean())),
            "stderr": repr(stderr), "seeds": " ".join(map(str, run.seeds)),
        })
        log.info("sweep %s=%s: %.2f", args.axis, value, bests.mean())
    path = out / "sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        doc = json.loads(Path(args.query).read_text())
    except FileNotFoundError:
        raise UsageError(f"query file not found: {args.query}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed query JSON: {exc}") from None
    try:
        query = parse_query(doc)
    except QueryError as exc:
        raise UsageError(f"malformed query: {exc}") from None
    model_path = args.model or query.model_path
    if model_path is None:
        raise UsageError("no model given (--model or \"model_path\" in the query)")
    if args.model is None and not Path(model_path).is_absolute():
        model_path = str(Path(args.query).parent / model_path)
    model = _load_model(model_path)
    if isinstance(model, MlpActor):
        raise UsageError("verification needs a tree model")
    try:
        result = run_query(to_simple_form(model), query)
    except QueryError as exc:
        raise UsageError(f"query does not fit the model: {exc}") from None
    print(json.dumps(_jsonable(result), indent=1, sort_keys=True))
    return EXIT_OK if result["ok"] else EXIT_VIOLATED


def cmd_crispify(args) -> int:
    model = _load_model(args.model)
    if isinstance(model, MlpActor):
        raise UsageError("crispify needs a tree model")
    try:
        crisp = post_hoc_crispify(model)
    except InvalidModeError as exc:
        raise UsageError(str(exc)) from None
    export.save(crisp, args.out)
    print(f"wrote {args.out}")
    if args.env:
        env = make_env(args.env)
        before = evaluate(model, env, args.episodes, args.seed)
        after = evaluate(crisp, env, args.episodes, args.seed)
        loss = 0.0 if before.mean == 0 else 100.0 * (before.mean - after.mean) / abs(before.mean)
        print(f"fuzzy return {before.mean:.2f} +- {before.stderr:.2f}")
        print(f"crisp return {after.mean:.2f} +- {after.stderr:.2f}")
        print(f"return lost {loss:.1f}%")
    return EXIT_OK


def cmd_export(args) -> int:
    model = _load_model(args.model)
    if isinstance(model, MlpActor):
        raise UsageError("export renders tree models only")
    render = export.RENDERERS[args.format]
    names = args.feature_names.split(",") if args.feature_names else None
    try:
        text = render(model, feature_names=names)
    except DegenerateNodeError as exc:
        print(f"error: cannot render: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _add_run_flags(p):
    p.add_argument("--config", help="JSON run configuration; flags override its values")
    p.add_argument("--env", choices=sorted(ENVIRONMENTS))
    p.add_argument("--actor", choices=ACTORS)
    p.add_argument("--variant", choices=["icct", "icct_static", "icct_complete", "cddt", "cddt_controllers"])
    p.add_argument("--leaves", type=int)
    p.add_argument("--leaf-features", dest="leaf_features", type=int)
    p.add_argument("--argmax", dest="argmax_mode", choices=["straight_through", "gumbel"])
    p.add_argument("--gumbel-tau", dest="gumbel_tau", type=float)
    p.add_argument("--l1", dest="l1_leaf_penalty", type=float)
    p.add_argument("--steps", dest="total_steps", type=int)
    p.add_argument("--warmup", dest="warmup_steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr-actor", dest="lr_actor", type=float)
    p.add_argument("--lr-critic", dest="lr_critic", type=float)
    p.add_argument("--init-alpha", dest="init_alpha", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--eval-episodes", dest="eval_episodes", type=int)
    p.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--out", help="output directory")


_RUN_FLAG_KEYS = (
    "env", "actor", "variant", "leaves", "leaf_features", "argmax_mode", "gumbel_tau", "l1_leaf_penalty",
    "total_steps", "warmup_steps", "batch_size", "lr_actor", "lr_critic", "init_alpha", "gamma", "eval_every",
    "eval_episodes", "seeds", "out",
)


def _config_from_args(args) -> RunConfig:
    file_values = {}
    if args.config:
        try:
            file_values = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"malformed config JSON: {exc}") from None
    return resolve_config(file_values, {k: getattr(args, k) for k in _RUN_FLAG_KEYS})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icct", description="Interpretable continuous control trees")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train actors with SAC, one run per seed")
    _add_run_flags(p)
    p.set_defaults(parser=p, func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--env", required=True, choices=sorted(ENVIRONMENTS))
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=["deterministic", "train"], default="deterministic")
    p.add_argument("--json", help="also write the results as JSON")
    p.set_defaults(parser=p, func=cmd_eval)

    p = sub.add_parser("sweep", help="train along the leaves or controller-features axis")
    _add_run_flags(p)
    p.add_argument("--axis", choices=["leaves", "features"], required=True)
    p.add_argument("--values", required=True, help="comma-separated values, or 'all' for every feature count")
    p.set_defaults(parser=p, func=cmd_sweep)

    p = sub.add_parser("verify", help="answer a verification query (exit 4 when violated)")
    p.add_argument("--model")
    p.add_argument("--query", required=True)
    p.set_defaults(parser=p, func=cmd_verify)

    p = sub.add_parser("crispify", help="post-hoc crispify a fuzzy tree")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--env", choices=sorted(ENVIRONMENTS), help="also report returns before and after")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(parser=p, func=cmd_crispify)

    p = sub.add_parser("export", help="render a tree as text, paragraph or DOT")
    p.add_argument("--model", required=True)
    p.add_argument("--format", choices=sorted(export.RENDERERS), default="text")
    p.add_argument("--feature-names", help="comma-separated names overriding the stored ones")
    p.add_argument("--out")
    p.set_defaults(parser=p, func=cmd_export)
    return parser


def configure_logging() -> None:
    level_name = os.environ.get("ICCT_LOG", "warn").lower()
    level = LOG_LEVELS.get(level_name)
    logging.basicConfig(level=level or logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if level is None:
        log.warning("ignoring unknown ICCT_LOG=%r; use one of %s", level_name, ", ".join(LOG_LEVELS))


def main(argv=None) -> int:
    configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(args.parser.format_usage())
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, DegenerateNodeError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
