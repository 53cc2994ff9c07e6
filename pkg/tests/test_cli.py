import json
import math
import os

import numpy as np
import pytest

from swarm_mpc import cli
from swarm_mpc.cli import main
from swarm_mpc.model import ModelConfig, init_params, save_params
from swarm_mpc.render import PALETTE, attention_svg, episode_svg
from swarm_mpc.scenario import load_dataset, sample_scenario, save_scenarios


@pytest.fixture(autouse=True)
def single_worker(monkeypatch):
    monkeypatch.setenv("SWARM_MPC_THREADS", "1")


def run_cli(*argv):
    return main(list(argv))


def write_config(tmp_path, text):
    path = tmp_path / "config.txt"
    path.write_text(text)
    return str(path)


TINY_MODEL_CFG = "model.layers = 1\nmodel.d_hidden = 8\n"
FAST_OPT_CFG = "optimizer.max_iters = 40\n"


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_counts_and_manifest(tmp_path, capsys):
    out = tmp_path / "data"
    code = run_cli(
        "gen-data", "--vehicles", "1..1", "--obstacles", "0..0",
        "--trajectories", "1", "--seed", "3", "--steps", "20",
        "--config", write_config(tmp_path, FAST_OPT_CFG),
        "--out", str(out),
    )
    assert code == 0
    samples = load_dataset(str(out / "dataset.jsonl"))
    assert len(samples) == 20
    assert {s.trajectory_id for s in samples} == {0}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    assert manifest["tool_version"]
    assert manifest["combination_counts"][0]["samples"] == 20
    printed = capsys.readouterr().out
    assert "vehicles obstacles trajectories" in printed


def test_gen_data_zero_trajectories(tmp_path):
    out = tmp_path / "data"
    code = run_cli("gen-data", "--trajectories", "0", "--seed", "1", "--out", str(out))
    assert code == 0
    assert load_dataset(str(out / "dataset.jsonl")) == []
    assert (out / "manifest.json").exists()


def test_gen_data_cycles_combinations(tmp_path):
    out = tmp_path / "data"
    code = run_cli(
        "gen-data", "--vehicles", "1..2", "--obstacles", "0..0",
        "--trajectories", "2", "--seed", "5", "--steps", "6",
        "--config", write_config(tmp_path, FAST_OPT_CFG),
        "--out", str(out),
    )
    assert code == 0
    samples = load_dataset(str(out / "dataset.jsonl"))
    by_traj = {}
    for s in samples:
        by_traj.setdefault(s.trajectory_id, s)
    assert len(by_traj[0].states) == 1
    assert len(by_traj[1].states) == 2


def test_gen_data_deterministic(tmp_path):
    config = write_config(tmp_path, FAST_OPT_CFG)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run_cli(
            "gen-data", "--vehicles", "1..1", "--obstacles", "0..1",
            "--trajectories", "2", "--seed", "11", "--steps", "8",
            "--config", config, "--out", str(out),
        ) == 0
        outs.append((out / "dataset.jsonl").read_bytes())
    assert outs[0] == outs[1]


def test_gen_data_bad_range(tmp_path):
    assert run_cli("gen-data", "--vehicles", "3..1", "--trajectories", "1", "--out", str(tmp_path / "x")) == 3


# ---------------------------------------------------------------------------
# train / eval / rollout


@pytest.fixture(scope="module")
def tiny_pipeline(tmp_path_factory):
    """gen-data -> train once; reused by the eval/rollout/render tests."""
    root = tmp_path_factory.mktemp("pipeline")
    os.environ["SWARM_MPC_THREADS"] = "1"
    data = root / "data"
    config = root / "config.txt"
    config.write_text(
        TINY_MODEL_CFG + FAST_OPT_CFG +
        "train.max_epochs = 3\ntrain.batch_size = 16\ntrain.seed = 1\n"
    )
    assert main([
        "gen-data", "--vehicles", "1..1", "--obstacles", "0..0",
        "--trajectories", "3", "--seed", "2", "--steps", "10",
        "--config", str(config), "--out", str(data),
    ]) == 0
    run = root / "run"
    assert main([
        "train", "--data", str(data / "dataset.jsonl"), "--config", str(config),
        "--out", str(run),
    ]) == 0
    scen = root / "scenarios.jsonl"
    save_scenarios([sample_scenario(1, 0, rng_seed=s) for s in (100, 101)], str(scen))
    return {"root": root, "config": config, "model": run / "model.ckpt", "scenarios": scen}


def test_train_outputs(tiny_pipeline):
    run = tiny_pipeline["model"].parent
    assert tiny_pipeline["model"].exists()
    report = (run / "train_report.csv").read_text().splitlines()
    assert report[0] == "epoch,train_loss,val_loss,lr"
    assert len(report) == 4  # header + 3 epochs
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["stop_reason"] == "max_epochs"


def test_train_deterministic(tiny_pipeline, tmp_path):
    data = tiny_pipeline["root"] / "data" / "dataset.jsonl"
    ckpts = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main([
            "train", "--data", str(data), "--config", str(tiny_pipeline["config"]),
            "--out", str(out),
        ]) == 0
        ckpts.append((out / "model.ckpt").read_bytes())
    assert ckpts[0] == ckpts[1]


def test_train_missing_data_exits_2(tmp_path):
    assert run_cli("train", "--data", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")) == 2


def test_eval_writes_metrics_and_episodes(tiny_pipeline, tmp_path):
    out = tmp_path / "eval"
    code = main([
        "eval", "--model", str(tiny_pipeline["model"]),
        "--scenarios", str(tiny_pipeline["scenarios"]),
        "--config", str(tiny_pipeline["config"]),
        "--out", str(out),
    ])
    assert code == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("n_vehicles,n_obstacles,episodes")
    row = lines[1].split(",")
    assert row[0] == "1" and row[1] == "0" and row[2] == "2"
    assert row[4] == "-"  # collision rate is meaningless for (1,0)
    episodes = (out / "episodes.jsonl").read_text().splitlines()
    assert len(episodes) == 3  # header + 2 records
    rec = json.loads(episodes[1])
    assert rec["scenario"]["vehicles"] and "states" in rec


def test_rollout_and_render(tiny_pipeline, tmp_path):
    out = tmp_path / "ro"
    code = main([
        "rollout", "--model", str(tiny_pipeline["model"]),
        "--scenarios", str(tiny_pipeline["scenarios"]),
        "--scenario-index", "1",
        "--config", str(tiny_pipeline["config"]),
        "--out", str(out),
    ])
    assert code == 0
    render_out = tmp_path / "fig"
    assert main([
        "render", "--episodes", str(out / "episodes.jsonl"), "--attention",
        "--out", str(render_out),
    ]) == 0
    svgs = sorted(p.name for p in render_out.glob("*.svg"))
    assert any(name.startswith("episode_") for name in svgs)
    assert any(name.startswith("attention_") for name in svgs)


def test_rollout_index_out_of_range(tiny_pipeline, tmp_path):
    assert main([
        "rollout", "--model", str(tiny_pipeline["model"]),
        "--scenarios", str(tiny_pipeline["scenarios"]),
        "--scenario-index", "9", "--out", str(tmp_path / "x"),
    ]) == 3


def test_eval_corrupt_checkpoint_exits_3(tiny_pipeline, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(tiny_pipeline["model"].read_bytes()[:-4])
    assert main([
        "eval", "--model", str(bad), "--scenarios", str(tiny_pipeline["scenarios"]),
        "--out", str(tmp_path / "o"),
    ]) == 3


# ---------------------------------------------------------------------------
# render specifics on hand-built traces


def hand_record(n_vehicles=5, collisions=(), attention=None, steps=4):
    vehicles = [
        {"x": float(i), "y": 0.0, "theta": 0.0, "v": 0.0,
         "tx": float(i), "ty": 8.0, "ttheta": 0.0}
        for i in range(n_vehicles)
    ]
    states = [
        [[float(i), 2.0 * t, 0.0, 1.0] for i in range(n_vehicles)] for t in range(steps + 1)
    ]
    return {
        "version": 1,
        "index": 0,
        "scenario": {"seed": 0, "world_half_extent": 15.0, "vehicles": vehicles,
                     "obstacles": [{"x": -5.0, "y": -5.0, "r": 2.0}]},
        "reached": [True] * n_vehicles,
        "steps_to_reach": [steps] * n_vehicles,
        "distances": [8.0] * n_vehicles,
        "total_steps": steps,
        "states": states,
        "controls": [[[0.0, 0.0]] * n_vehicles] * steps,
        "collisions": list(collisions),
        "attention": attention,
        "step_efficiency": None,
    }


def test_episode_svg_no_collisions_no_red_dots():
    svg = episode_svg(hand_record())
    assert 'class="collision"' not in svg


def test_episode_svg_collision_dot():
    svg = episode_svg(hand_record(collisions=[{"step": 2, "kind": "veh-veh", "a": 0, "b": 1}]))
    assert svg.count('class="collision"') == 1


def test_episode_svg_palette_order():
    svg = episode_svg(hand_record(n_vehicles=5))
    positions = [svg.index(f'stroke="{c}"') for c in PALETTE[:5]]
    assert positions == sorted(positions)


def test_attention_svg_grid():
    matrix = [[None, 0.5, 1.0], [0.0, None, 0.25], [None, None, None]]
    svg = attention_svg(matrix, lo=0.0, hi=1.0)
    assert svg.count("<rect") == 10  # 9 cells + background
    assert 'fill="rgb(255,255,255)"' in svg  # the 1.0 entry is white
    assert 'fill="rgb(0,0,0)"' in svg        # the 0.0 entry is black


def test_render_episode_file(tmp_path):
    path = tmp_path / "episodes.jsonl"
    rec = hand_record(
        n_vehicles=3,
        attention=[[[None, 0.1, 0.2], [0.3, None, 0.4], [0.5, 0.6, None]]] * 4,
    )
    with open(path, "w") as fh:
        fh.write(json.dumps({"version": 1, "kind": "episodes"}) + "\n")
        fh.write(json.dumps(rec) + "\n")
    out = tmp_path / "fig"
    assert run_cli("render", "--episodes", str(path), "--attention", "--out", str(out)) == 0
    files = sorted(p.name for p in out.glob("*.svg"))
    assert "episode_0000.svg" in files
    assert sum(1 for f in files if f.startswith("attention_")) == 4


def test_render_malformed_file_names_line(tmp_path, capsys):
    path = tmp_path / "episodes.jsonl"
    path.write_text(json.dumps({"version": 1, "kind": "episodes"}) + "\n{broken\n")
    assert run_cli("render", "--episodes", str(path), "--out", str(tmp_path / "o")) == 3
    assert ":2" in capsys.readouterr().err


def test_render_missing_attention_is_numeric_failure(tmp_path):
    path = tmp_path / "episodes.jsonl"
    with open(path, "w") as fh:
        fh.write(json.dumps({"version": 1, "kind": "episodes"}) + "\n")
        fh.write(json.dumps(hand_record(attention=None)) + "\n")
    assert run_cli("render", "--episodes", str(path), "--attention", "--out", str(tmp_path / "o")) == 4


# ---------------------------------------------------------------------------
# config plumbing


def test_unknown_config_key_rejected(tmp_path):
    cfg = write_config(tmp_path, "optimizer.bogus = 1\n")
    assert run_cli("gen-data", "--trajectories", "0", "--config", cfg, "--out", str(tmp_path / "o")) == 3


def test_bad_config_value_rejected(tmp_path):
    cfg = write_config(tmp_path, "optimizer.w_pos = -3\n")
    assert run_cli("gen-data", "--trajectories", "0", "--config", cfg, "--out", str(tmp_path / "o")) == 3


def test_config_file_parsing(tmp_path):
    cfg = write_config(tmp_path, "# comment\nmodel.layers = 2  # tail comment\n\nkin.dt = 0.1\n")
    settings = cli.load_settings(cfg)
    assert settings.model.layers == 2
    assert settings.kin.dt == 0.1


def test_invalid_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SWARM_MPC_THREADS", "many")
    assert run_cli("gen-data", "--trajectories", "0", "--out", str(tmp_path / "o")) == 3


def test_workers_env_overrides_flag(monkeypatch):
    monkeypatch.setenv("SWARM_MPC_THREADS", "3")
    assert cli.resolve_workers(8) == 3
    monkeypatch.delenv("SWARM_MPC_THREADS")
    assert cli.resolve_workers(8) == 8
    assert cli.resolve_workers(None) >= 1


def test_help_documents_config_keys():
    text = cli.build_parser().format_help()
    assert "optimizer.w_pos" in text
    assert "train.lr0" in text
    assert "model.d_hidden" in text
