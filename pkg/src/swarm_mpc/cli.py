"""Command-line pipeline: gen-data, train, eval, rollout and render.

Exit codes: 0 success, 2 usage or missing input, 3 validation failure,
4 internal numeric failure.  SWARM_MPC_THREADS overrides the worker count.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np

from . import __version__
from . import autodiff as ad
from .dynamics import KinematicParams
from .evaluation import (
    EvalConfig,
    EvaluationError,
    EpisodeResult,
    aggregate_metrics,
    rollout_episode,
    step_efficiency,
    write_metrics_csv,
)
from .model import (
    CheckpointError,
    ModelConfig,
    ModelError,
    load_params,
    make_policy,
    save_params,
)
from .optimizer import NoiseConfig, OptimizerConfig, OptimizerError, generate_trajectory
from .render import attention_bounds, attention_svg, episode_svg
from .scenario import (
    FormatError,
    SamplingError,
    Scenario,
    ScenarioConfig,
    ScenarioError,
    load_dataset,
    load_scenarios,
    sample_scenario,
    save_dataset,
    save_scenarios,
    split_dataset,
)
from .training import TrainConfig, TrainingError, train, write_report_csv

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_NUMERIC = 4

TRAIN_SPLIT_RATIO = 0.8  # trajectory-level train:val = 4:1


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class Settings:
    kin: KinematicParams
    scenario: ScenarioConfig
    optimizer: OptimizerConfig
    noise: NoiseConfig
    model: ModelConfig
    train: TrainConfig
    eval: EvalConfig


def default_settings() -> Settings:
    return Settings(
        kin=KinematicParams(),
        scenario=ScenarioConfig(),
        optimizer=OptimizerConfig(),
        noise=NoiseConfig(),
        model=ModelConfig(),
        train=TrainConfig(),
        eval=EvalConfig(),
    )


def _parse_value(raw: str, target_type: type):
    if target_type is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    return target_type(raw)


def parse_config_file(path: str) -> dict[str, str]:
    """Plain `section.key = value` lines; '#' starts a comment."""
    overrides: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = text.partition("=")
            overrides[key.strip()] = value.strip()
    return overrides


def apply_overrides(settings: Settings, overrides: dict[str, str]) -> Settings:
    sections = {f.name: getattr(settings, f.name) for f in fields(settings)}
    for key, raw in overrides.items():
        section_name, _, field_name = key.partition(".")
        if section_name not in sections or not field_name:
            raise ConfigError(f"unknown config key {key!r}")
        section = sections[section_name]
        matching = {f.name: f for f in fields(section)}
        if field_name not in matching:
            raise ConfigError(f"unknown config key {key!r}")
        ftype = type(getattr(section, field_name))
        try:
            value = _parse_value(raw, ftype)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {key}: {e}") from e
        try:
            sections[section_name] = replace(section, **{field_name: value})
        except ValueError as e:
            raise ConfigError(f"invalid {key}: {e}") from e
    return Settings(**sections)


def settings_help() -> str:
    lines = ["configuration keys (section.key = value) and defaults:"]
    s = default_settings()
    for f in fields(s):
        section = getattr(s, f.name)
        for sf in fields(section):
            lines.append(f"  {f.name}.{sf.name} = {getattr(section, sf.name)!r}")
    return "\n".join(lines)


def load_settings(config_path: str | None) -> Settings:
    settings = default_settings()
    if config_path:
        settings = apply_overrides(settings, parse_config_file(config_path))
    return settings


def settings_as_dict(settings: Settings) -> dict:
    out: dict[str, dict] = {}
    for f in fields(settings):
        section = getattr(settings, f.name)
        out[f.name] = {sf.name: getattr(section, sf.name) for sf in fields(section)}
    return out


def resolve_workers(flag: int | None) -> int:
    env = os.environ.get("SWARM_MPC_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as e:
            raise ConfigError(f"SWARM_MPC_THREADS must be an integer, got {env!r}") from e
    if flag:
        return max(1, flag)
    return os.cpu_count() or 1


def write_manifest(out_dir: str, command: str, args: dict, settings: Settings,
                   inputs: list[str], outputs: list[str], extra: dict, wall_seconds: float) -> str:
    path = os.path.join(out_dir, "manifest.json")
    payload = {
        "command": command,
        "args": args,
        "settings": settings_as_dict(settings),
        "inputs": inputs,
        "outputs": outputs,
        "tool_version": __version__,
        "wall_seconds": wall_seconds,
        **extra,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _parse_range(text: str) -> tuple[int, int]:
    if ".." in text:
        lo_s, _, hi_s = text.partition("..")
        lo, hi = int(lo_s), int(hi_s)
    else:
        lo = hi = int(text)
    if hi < lo:
        raise ConfigError(f"bad range {text!r}")
    return lo, hi


def _derived_seed(master: int, *path: int) -> int:
    return int(np.random.SeedSequence([master, *path]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# gen-data


def _gen_data_task(task: tuple) -> dict:
    (tid, n_veh, n_obs, master_seed, steps, settings) = task
    try:
        scenario = sample_scenario(n_veh, n_obs, _derived_seed(master_seed, tid), settings.scenario)
        noise_rng = np.random.default_rng([master_seed, tid, 1])
        result = generate_trajectory(
            scenario,
            config=settings.optimizer,
            noise=settings.noise,
            kin=settings.kin,
            steps=steps,
            trajectory_id=tid,
            noise_rng=noise_rng,
        )
        return {"tid": tid, "combo": (n_veh, n_obs), "samples": result.samples,
                "success": result.success, "scenario": scenario, "error": None}
    except (SamplingError, OptimizerError) as e:
        return {"tid": tid, "combo": (n_veh, n_obs), "samples": [], "success": False,
                "scenario": None, "error": str(e)}


def cmd_gen_data(args: argparse.Namespace) -> int:
    t0 = time.monotonic()
    settings = load_settings(args.config)
    v_lo, v_hi = _parse_range(args.vehicles)
    o_lo, o_hi = _parse_range(args.obstacles)
    if v_lo < 1:
        raise ConfigError("--vehicles must start at 1 or more")
    if o_lo < 0:
        raise ConfigError("--obstacles must be >= 0")
    if args.trajectories < 0:
        raise ConfigError("--trajectories must be >= 0")
    os.makedirs(args.out, exist_ok=True)

    combos = [(v, o) for v in range(v_lo, v_hi + 1) for o in range(o_lo, o_hi + 1)]
    tasks = [
        (tid, *combos[tid % len(combos)], args.seed, args.steps, settings)
        for tid in range(args.trajectories)
    ]
    workers = resolve_workers(args.workers)
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_gen_data_task, tasks, chunksize=1))
    else:
        results = [_gen_data_task(t) for t in tasks]
    results.sort(key=lambda r: r["tid"])

    samples = []
    scenarios = []
    counts: dict[tuple[int, int], dict[str, int]] = {}
    failures = []
    for res in results:
        stats = counts.setdefault(res["combo"], {"trajectories": 0, "samples": 0, "successes": 0})
        if res["error"] is not None:
            failures.append({"trajectory_id": res["tid"], "error": res["error"]})
            print(f"trajectory {res['tid']} failed: {res['error']}", file=sys.stderr)
            continue
        stats["trajectories"] += 1
        stats["samples"] += len(res["samples"])
        stats["successes"] += int(res["success"])
        samples.extend(res["samples"])
        scenarios.append(res["scenario"])

    dataset_path = os.path.join(args.out, "dataset.jsonl")
    scenarios_path = os.path.join(args.out, "scenarios.jsonl")
    save_dataset(samples, dataset_path)
    save_scenarios(scenarios, scenarios_path)

    print("vehicles obstacles trajectories samples successes")
    for (nv, no), stats in sorted(counts.items()):
        print(f"{nv:8d} {no:9d} {stats['trajectories']:12d} {stats['samples']:7d} {stats['successes']:9d}")
    print(f"total samples: {len(samples)}")

    write_manifest(
        args.out,
        "gen-data",
        {"vehicles": args.vehicles, "obstacles": args.obstacles,
         "trajectories": args.trajectories, "seed": args.seed, "steps": args.steps,
         "workers": workers, "config": args.config},
        settings,
        inputs=[p for p in [args.config] if p],
        outputs=[dataset_path, scenarios_path],
        extra={
            "combination_counts": [
                {"vehicles": nv, "obstacles": no, **stats}
                for (nv, no), stats in sorted(counts.items())
            ],
            "failures": failures,
        },
        wall_seconds=time.monotonic() - t0,
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args: argparse.Namespace) -> int:
    t0 = time.monotonic()
    settings = load_settings(args.config)
    if args.seed is not None:
        settings = replace(settings, train=replace(settings.train, seed=args.seed))
    samples = load_dataset(args.data)
    if not samples:
        raise TrainingError("dataset is empty")
    os.makedirs(args.out, exist_ok=True)

    train_set, val_set = split_dataset(samples, TRAIN_SPLIT_RATIO, settings.train.seed)
    params, report = train(train_set, val_set, settings.model, settings.train)

    ckpt_path = os.path.join(args.out, "model.ckpt")
    report_path = os.path.join(args.out, "train_report.csv")
    save_params(params, ckpt_path)
    write_report_csv(report, report_path)
    print(
        f"trained {report.epochs_run} epochs ({report.stop_reason}); "
        f"best epoch {report.best_epoch} val loss {report.best_val_loss:.6g}; "
        f"{params.parameter_count()} parameters"
    )
    write_manifest(
        args.out,
        "train",
        {"data": args.data, "config": args.config, "seed": settings.train.seed},
        settings,
        inputs=[p for p in [args.data, args.config] if p],
        outputs=[ckpt_path, report_path],
        extra={
            "epochs_run": report.epochs_run,
            "stop_reason": report.stop_reason,
            "best_epoch": report.best_epoch,
            "best_val_loss": report.best_val_loss,
            "train_samples": len(train_set),
            "val_samples": len(val_set),
        },
        wall_seconds=time.monotonic() - t0,
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / rollout


def _state_rows(episode: EpisodeResult) -> list:
    return [[[s.x, s.y, s.theta, s.v] for s in row] for row in episode.states]


def _scenario_record(sc: Scenario) -> dict:
    return {
        "seed": sc.seed,
        "world_half_extent": sc.world_half_extent,
        "vehicles": [
            {"x": t.start.x, "y": t.start.y, "theta": t.start.theta, "v": t.start.v,
             "tx": t.target_x, "ty": t.target_y, "ttheta": t.target_theta}
            for t in sc.vehicles
        ],
        "obstacles": [{"x": ob.x, "y": ob.y, "r": ob.r} for ob in sc.obstacles],
    }


def _mean_attention(episode: EpisodeResult) -> list | None:
    if episode.attention is None or any(m is None for m in episode.attention):
        return None
    out = []
    for mats in episode.attention:
        mean = np.mean(mats, axis=0)
        out.append([[None if not math.isfinite(v) else v for v in row] for row in mean.tolist()])
    return out


def episode_record(index: int, scenario: Scenario, episode: EpisodeResult,
                   efficiency: float | None) -> dict:
    return {
        "version": 1,
        "index": index,
        "scenario": _scenario_record(scenario),
        "reached": episode.reached,
        "steps_to_reach": episode.steps_to_reach,
        "distances": episode.distances,
        "total_steps": episode.total_steps,
        "states": _state_rows(episode),
        "controls": [[[u.pedal, u.steer] for u in row] for row in episode.controls],
        "collisions": [
            {"step": ev.step, "kind": ev.kind, "a": ev.a, "b": ev.b} for ev in episode.collisions
        ],
        "attention": _mean_attention(episode),
        "step_efficiency": efficiency,
    }


def _eval_task(task: tuple) -> tuple[int, EpisodeResult, float | None]:
    index, scenario, model_path, settings, record_attention = task
    params = load_params(model_path)
    policy = make_policy(params, record_attention=record_attention)
    episode = rollout_episode(scenario, policy, settings.kin, settings.eval)
    eff = step_efficiency(scenario, policy, settings.kin, settings.eval, joint=episode)
    return index, episode, eff


def _write_episodes(path: str, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"version": 1, "kind": "episodes"}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def cmd_eval(args: argparse.Namespace) -> int:
    t0 = time.monotonic()
    settings = load_settings(args.config)
    params = load_params(args.model)  # validates the checkpoint early
    scenarios = load_scenarios(args.scenarios)
    if not scenarios:
        raise ScenarioError("scenario file has no scenarios")
    os.makedirs(args.out, exist_ok=True)

    workers = resolve_workers(args.workers)
    tasks = [(i, sc, args.model, settings, False) for i, sc in enumerate(scenarios)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_task, tasks, chunksize=1))
    else:
        results = [_eval_task(t) for t in tasks]
    results.sort(key=lambda r: r[0])

    episodes = [ep for _, ep, _ in results]
    efficiencies = [eff for _, _, eff in results]
    report = aggregate_metrics(episodes, scenarios, efficiencies)

    episodes_path = os.path.join(args.out, "episodes.jsonl")
    metrics_path = os.path.join(args.out, "metrics.csv")
    _write_episodes(
        episodes_path,
        [episode_record(i, scenarios[i], episodes[i], efficiencies[i]) for i in range(len(scenarios))],
    )
    write_metrics_csv(report, metrics_path)
    for g in report.groups:
        cr = "-" if g.collision_rate is None else f"{g.collision_rate:.4e}"
        se = "-" if g.step_efficiency is None else f"{g.step_efficiency:.4f}"
        print(
            f"({g.n_vehicles},{g.n_obstacles}) episodes={g.episodes} "
            f"success={g.success_rate:.4f} collision_rate={cr} step_efficiency={se}"
        )
    write_manifest(
        args.out,
        "eval",
        {"model": args.model, "scenarios": args.scenarios, "config": args.config, "workers": workers},
        settings,
        inputs=[p for p in [args.model, args.scenarios, args.config] if p],
        outputs=[episodes_path, metrics_path],
        extra={"episodes": len(episodes), "model_parameters": params.parameter_count()},
        wall_seconds=time.monotonic() - t0,
    )
    return EXIT_OK


def cmd_rollout(args: argparse.Namespace) -> int:
    t0 = time.monotonic()
    settings = load_settings(args.config)
    params = load_params(args.model)
    scenarios = load_scenarios(args.scenarios)
    if not 0 <= args.scenario_index < len(scenarios):
        raise ConfigError(
            f"--scenario-index {args.scenario_index} out of range (file has {len(scenarios)})"
        )
    os.makedirs(args.out, exist_ok=True)
    scenario = scenarios[args.scenario_index]

    policy = make_policy(params, record_attention=params.config.use_graph)
    episode = rollout_episode(
        scenario, policy, settings.kin, settings.eval,
        record_attention=params.config.use_graph,
    )
    eff = step_efficiency(scenario, policy, settings.kin, settings.eval, joint=episode)
    episodes_path = os.path.join(args.out, "episodes.jsonl")
    _write_episodes(episodes_path, [episode_record(args.scenario_index, scenario, episode, eff)])
    reached = sum(episode.reached)
    print(
        f"scenario {args.scenario_index}: {reached}/{episode.n_vehicles} vehicles reached, "
        f"{len(episode.collisions)} collision events, {episode.total_steps} steps"
    )
    write_manifest(
        args.out,
        "rollout",
        {"model": args.model, "scenarios": args.scenarios,
         "scenario_index": args.scenario_index, "config": args.config},
        settings,
        inputs=[p for p in [args.model, args.scenarios, args.config] if p],
        outputs=[episodes_path],
        extra={"reached": episode.reached, "collisions": len(episode.collisions)},
        wall_seconds=time.monotonic() - t0,
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# render


def _load_episode_records(path: str) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(path, 1, "missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise FormatError(path, 1, f"bad header: {e.msg}") from e
    if not isinstance(header, dict) or header.get("kind") != "episodes":
        raise FormatError(path, 1, "expected 'episodes' header")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(path, lineno, f"bad episode record: {e.msg}") from e
        if not isinstance(rec, dict) or "scenario" not in rec or "states" not in rec:
            raise FormatError(path, lineno, "episode record missing scenario/states")
        records.append(rec)
    return records


def cmd_render(args: argparse.Namespace) -> int:
    t0 = time.monotonic()
    records = _load_episode_records(args.episodes)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for rec in records:
        index = rec.get("index", 0)
        path = os.path.join(args.out, f"episode_{index:04d}.svg")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(episode_svg(rec))
        outputs.append(path)
        if args.attention:
            steps = rec.get("attention")
            if steps is None:
                raise EvaluationError(f"episode {index}: no attention available")
            lo, hi = attention_bounds(steps)
            n_frames = min(8, len(steps))
            picks = sorted({int(round(k * (len(steps) - 1) / max(1, n_frames - 1))) for k in range(n_frames)})
            for t in picks:
                apath = os.path.join(args.out, f"attention_{index:04d}_t{t:04d}.svg")
                with open(apath, "w", encoding="utf-8") as fh:
                    fh.write(attention_svg(steps[t], lo, hi))
                outputs.append(apath)
    print(f"rendered {len(outputs)} file(s) from {len(records)} episode(s)")
    settings = default_settings()  # render consults no numeric settings
    write_manifest(
        args.out,
        "render",
        {"episodes": args.episodes, "attention": bool(args.attention)},
        settings,
        inputs=[args.episodes],
        outputs=outputs,
        extra={},
        wall_seconds=time.monotonic() - t0,
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swarm-mpc",
        description="Multi-vehicle navigation: optimisation-labelled data, attention-GNN imitation, closed-loop evaluation.",
        epilog=settings_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate optimisation-labelled trajectories")
    p.add_argument("--vehicles", default="1..3", help="vehicle count or range A..B")
    p.add_argument("--obstacles", default="0..4", help="obstacle count or range C..D")
    p.add_argument("--trajectories", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=120, help="timesteps per trajectory")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="imitation-train the control network")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="closed-loop metrics on a scenario set")
    p.add_argument("--model", required=True)
    p.add_argument("--scenarios", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rollout", help="trace one scenario (records attention)")
    p.add_argument("--model", required=True)
    p.add_argument("--scenarios", required=True)
    p.add_argument("--scenario-index", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("render", help="draw SVG figures from an episodes file")
    p.add_argument("--episodes", required=True)
    p.add_argument("--attention", action="store_true", help="also draw attention matrices")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: missing input: {e.filename or e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, FormatError, ScenarioError, CheckpointError, TrainingError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OptimizerError, EvaluationError, ModelError, ad.AutodiffError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
