import json

import numpy as np
import pytest

from temporl import cli, harness, metrics
from temporl.agent import ConfigError
from temporl.netlib import load_params

# small enough that a full seed trains in well under a second
TINY_AGENT = [
    "--epochs", "1", "--steps-per-epoch", "60",
    "--set", "start_steps=20", "--set", "update_after=20", "--set", "update_every=20",
    "--set", "batch_size=8", "--set", "hidden=8x2", "--set", "mixing_hidden=8x2",
    "--set", "replay_size=1000", "--set", "eval_episodes=1",
]


def run(argv, capsys=None):
    code = cli.main(argv)
    if capsys is not None:
        return code, capsys.readouterr()
    return code


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small dataset and a k=1 prior shared by the slower CLI tests."""
    out = tmp_path_factory.mktemp("cli")
    assert run(["collect", "--out", str(out), "--n-traj", "12", "--len", "64", "--seed", "1"]) == 0
    assert run(["train-prior", "--out", str(out), "--dataset", str(out / "dataset.csv"),
                "--epochs", "3", "--hidden", "16", "--batch-size", "64"]) == 0
    return out


# -- configuration ------------------------------------------------------------------
def test_defaults_are_reference_values():
    cfg = harness.ExperimentConfig()
    assert (cfg.n_traj, cfg.traj_len, cfg.prior_lr, cfg.prior_batch_size) == (4000, 500, 1e-4, 400)
    assert (cfg.gamma, cfg.polyak, cfg.n_step, cfg.her_ratio) == (0.99, 0.995, 10, 4.0)
    assert cfg.hidden == [256, 256] and cfg.replay_size == 500_000
    assert (cfg.epochs, cfg.steps_per_epoch) == (125, 4000)
    assert harness.config_drift(cfg) == {}


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="bogus_key"):
        harness.build_config("paper", overrides={"bogus_key": "1"})
    with pytest.raises(ConfigError):
        harness.build_config("nonsense")
    with pytest.raises(ConfigError):
        harness.with_overrides(harness.ExperimentConfig(), nope=1)


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        harness.build_config(overrides={"epochs": "many"})
    with pytest.raises(ConfigError):
        harness.build_config(overrides={"mode": "ppo"})
    with pytest.raises(ConfigError):
        harness.build_config(overrides={"cond": "last-velocity"})


def test_precedence_preset_file_override(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# desk run\nprior_epochs = 7\nlr = 3e-4  # trailing comment\nhidden = 32x3\n")
    cfg = harness.build_config("desk", harness.read_config_file(path), {"prior_epochs": "9"})
    assert cfg.prior_epochs == 9
    assert cfg.lr == 3e-4
    assert cfg.hidden == [32, 32, 32]
    assert cfg.n_traj == 400  # from the preset
    drift = harness.config_drift(cfg)
    assert drift["n_traj"] == {"reference": 4000, "value": 400}
    assert "gamma" not in drift


def test_config_file_syntax_error(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("epochs 3\n")
    with pytest.raises(ConfigError, match=":1:"):
        harness.read_config_file(path)


@pytest.mark.parametrize("text,expected", [
    ("0..4", [0, 1, 2, 3, 4]), ("0,3,7", [0, 3, 7]), ("64x2", [64, 64]), ("5", [5]),
])
def test_parse_int_list(text, expected):
    assert harness.parse_int_list(text) == expected


def test_scientific_integers():
    assert harness.build_config(overrides={"replay_size": "1e5"}).replay_size == 100_000


def test_output_root_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("TEMPORL_OUT", str(tmp_path / "env_root"))
    assert harness.output_root() == tmp_path / "env_root"
    assert (tmp_path / "env_root").is_dir()
    assert harness.output_root(tmp_path / "explicit") == tmp_path / "explicit"


def test_cli_uses_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("TEMPORL_OUT", str(tmp_path))
    assert run(["collect", "--n-traj", "2", "--len", "5"]) == 0
    assert (tmp_path / "dataset.csv").exists()


def test_mean_and_spread():
    assert harness.mean_and_spread([1.0]) == (1.0, 0.0)
    mean, spread = harness.mean_and_spread([1.0, 2.0, 3.0])
    assert mean == 2.0 and spread == pytest.approx(1.0)


def test_lambda_trend_windows():
    trace = [(s, 1.0 - s / 1000) for s in range(100, 1001, 100)]
    first, last = harness.lambda_trend(trace, 1000)
    assert first == pytest.approx(0.9) and last == pytest.approx(0.0)
    with pytest.raises(ValueError):
        harness.lambda_trend([(500, 0.5)], 1000)


# -- exit codes ---------------------------------------------------------------------
def test_bogus_layout_is_config_error(tmp_path, capsys):
    code, io = run(["collect", "--out", str(tmp_path), "--layout", "bogus"], capsys)
    assert code == 2
    assert "bogus" in io.err


def test_unknown_flag_is_usage_error(tmp_path, capsys):
    code, io = run(["collect", "--out", str(tmp_path), "--frobnicate"], capsys)
    assert code == 2
    assert "usage" in io.err


def test_missing_subcommand():
    assert run([]) == 2


def test_bad_set_syntax(tmp_path):
    assert run(["collect", "--out", str(tmp_path), "--set", "epochs"]) == 2


def test_temporl_without_prior_is_config_error(tmp_path, capsys):
    code, io = run(["train", "--out", str(tmp_path), "--mode", "temporl"], capsys)
    assert code == 2
    assert "prior" in io.err


def test_missing_dataset_is_config_error(tmp_path):
    assert run(["train-prior", "--out", str(tmp_path), "--dataset", str(tmp_path / "none.csv")]) == 2


def test_corrupt_checkpoint_is_config_error(tmp_path):
    bad = tmp_path / "p.bin"
    bad.write_bytes(b"not a checkpoint")
    assert run(["explore-eval", "--out", str(tmp_path), "--prior", str(bad), "--policy", "prior"]) == 2


def test_ragged_psd_input_is_runtime_failure(tmp_path, capsys):
    assert run(["collect", "--out", str(tmp_path), "--n-traj", "2", "--len", "20"]) == 0
    code, io = run(["psd", "--out", str(tmp_path), "--dataset", str(tmp_path / "dataset.csv"),
                    "--n-seq", "2", "--len", "50"], capsys)
    assert code == 3
    assert "runtime failure" in io.err


# -- collect ------------------------------------------------------------------------
def test_collect_row_count_and_determinism(tmp_path):
    argv = ["collect", "--layout", "room", "--n-traj", "40", "--len", "50", "--seed", "1"]
    assert run(argv + ["--out", str(tmp_path / "a")]) == 0
    assert run(argv + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "dataset.csv").read_bytes()
    assert a == (tmp_path / "b" / "dataset.csv").read_bytes()
    assert len(a.decode().splitlines()) == 1 + 40 * 50


@pytest.mark.slow
def test_collect_reference_command(tmp_path):
    argv = ["collect", "--out", str(tmp_path), "--layout", "room", "--n-traj", "400", "--len", "500", "--seed", "1"]
    assert run(argv) == 0
    assert len((tmp_path / "dataset.csv").read_text().splitlines()) == 1 + 400 * 500


# -- train-prior --------------------------------------------------------------------
def test_train_prior_writes_checkpoint_and_curve(workspace):
    spec = load_params(workspace / "prior.bin").spec
    assert spec["conditioning"]["kind"] == "last_actions"
    assert spec["conditioning"]["k"] == 1
    rows = harness.read_csv(workspace / "prior_nll.csv")
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3]
    assert all(np.isfinite(float(r["nll"])) for r in rows)


def test_train_prior_state_conditioning(workspace, tmp_path):
    assert run(["train-prior", "--out", str(tmp_path), "--dataset", str(workspace / "dataset.csv"),
                "--cond", "state", "--epochs", "2", "--hidden", "8", "--name", "behavior"]) == 0
    spec = load_params(tmp_path / "behavior.bin").spec
    assert spec["conditioning"]["kind"] == "state"
    assert len(harness.read_csv(tmp_path / "behavior_nll.csv")) == 2


# -- train / eval / metrics ---------------------------------------------------------
def test_train_sac_five_seeds(tmp_path, capsys):
    code, io = run(["train", "--out", str(tmp_path), "--mode", "sac", "--layout", "room", "--seeds", "0..4",
                    *TINY_AGENT], capsys)
    assert code == 0
    assert len(sorted(tmp_path.glob("curve_sac_room_seed*.csv"))) == 5
    assert io.out.count("seed ") == 5
    rec = json.loads((tmp_path / "run_sac_room_seed3.json").read_text())
    assert rec["seed"] == 3 and rec["config"]["mode"] == "sac"
    assert rec["version"]
    assert rec["drift_from_reference"]["epochs"] == {"reference": 125, "value": 1}

    assert run(["metrics", "--out", str(tmp_path)]) == 0
    rows = harness.read_csv(tmp_path / "metrics.csv")
    assert list(rows[0]) == harness.METRIC_HEADER
    assert {r["environment"] for r in rows} == {"room/sac"}


def test_train_temporl_populates_lambda(workspace, tmp_path):
    code = run(["train-agent", "--out", str(tmp_path), "--mode", "temporl", "--layout", "corridor",
                "--prior", str(workspace / "prior.bin"), "--seeds", "0", *TINY_AGENT])
    assert code == 0
    rows = harness.read_csv(tmp_path / "curve_temporl_corridor_seed0.csv")
    assert rows and all(0.0 < float(r["mean_lambda"]) < 1.0 for r in rows)
    assert (tmp_path / "lambda_temporl_corridor_seed0.csv").exists()


def test_training_is_reproducible(workspace, tmp_path):
    argv = ["train", "--mode", "temporl", "--layout", "room", "--prior", str(workspace / "prior.bin"),
            "--seeds", "2", *TINY_AGENT]
    for sub in ("a", "b"):
        assert run(argv + ["--out", str(tmp_path / sub)]) == 0
    for name in ("curve_temporl_room_seed2.csv", "lambda_temporl_room_seed2.csv", "agent_temporl_room_seed2.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_parallel_workers_match_serial(tmp_path):
    argv = ["train", "--mode", "sac", "--layout", "room", "--seeds", "0,1", *TINY_AGENT]
    assert run(argv + ["--out", str(tmp_path / "serial")]) == 0
    assert run(argv + ["--out", str(tmp_path / "pool"), "--workers", "2"]) == 0
    for seed in (0, 1):
        name = f"curve_sac_room_seed{seed}.csv"
        assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "pool" / name).read_bytes()


def test_sac_bc_needs_dataset(tmp_path):
    assert run(["train", "--out", str(tmp_path), "--mode", "sac_bc", *TINY_AGENT]) == 2


def test_eval_checkpoint(tmp_path, capsys):
    assert run(["train", "--out", str(tmp_path), "--mode", "sac", "--seeds", "0", *TINY_AGENT]) == 0
    code, io = run(["eval", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "agent_sac_room_seed0.bin"),
                    "--episodes", "2"], capsys)
    assert code == 0
    rows = harness.read_csv(tmp_path / "eval.csv")
    assert [r["metric"] for r in rows] == ["success_rate", "mean_return"]


def test_metrics_without_runs_is_config_error(tmp_path):
    assert run(["metrics", "--out", str(tmp_path)]) == 2


# -- explore-eval -------------------------------------------------------------------
def test_explore_eval_is_deterministic(workspace, tmp_path):
    argv = ["explore-eval", "--layout", "room81", "--prior", str(workspace / "prior.bin"),
            "--seeds", "0,1", "--n-traj", "3", "--len", "40"]
    for sub in ("a", "b"):
        assert run(argv + ["--out", str(tmp_path / sub)]) == 0
    a = (tmp_path / "a" / "explore_room81.csv").read_bytes()
    assert a == (tmp_path / "b" / "explore_room81.csv").read_bytes()
    rows = harness.read_csv(tmp_path / "a" / "explore_room81.csv")
    assert {(r["metric"], r["environment"]) for r in rows} == {
        (m, f"room81/{k}") for m in ("coverage", "gyration_sq") for k in ("uniform", "prior")
    }


def test_explore_eval_uniform_needs_no_prior(tmp_path):
    assert run(["explore-eval", "--out", str(tmp_path), "--policy", "uniform", "--n-traj", "2", "--len", "10"]) == 0
    assert run(["explore-eval", "--out", str(tmp_path), "--policy", "prior", "--n-traj", "2", "--len", "10"]) == 2


def test_uniform_rollouts_stay_in_free_space():
    cfg = harness.build_config(overrides={"layout": "maze", "seeds": "0", "explore_traj": "2", "explore_len": "200"})
    env = harness.MazeEnv(harness.get_layout("maze"), 0)
    sampler = harness.make_sampler("uniform", np.random.default_rng(0))
    trajs = harness.rollout_positions(env, sampler, cfg.explore_traj, cfg.explore_len)
    assert [t.shape for t in trajs] == [(200, 2), (200, 2)]
    assert all(env.spec.is_free(p) for t in trajs for p in t)


# -- psd ------------------------------------------------------------------------------
def test_psd_rows_and_shapes(workspace, tmp_path):
    code = run(["psd", "--out", str(tmp_path), "--dataset", str(workspace / "dataset.csv"),
                "--prior", str(workspace / "prior.bin"), "--n-seq", "12", "--len", "64"])
    assert code == 0
    rows = harness.read_csv(tmp_path / "psd.csv")
    assert len(rows) == 64 // 2 + 1
    assert list(rows[0]) == ["bin", "frequency", "dataset", "prior", "uniform"]
    assert float(rows[-1]["frequency"]) == pytest.approx(0.5)


def test_uniform_spectrum_is_near_flat(tmp_path):
    length, n_seq = 500, 100
    cfg = harness.build_config(overrides={"psd_len": str(length), "psd_sequences": str(n_seq)})
    psd = harness.run_psd(cfg, tmp_path / "psd.csv")["uniform"]
    # uniform on [-1, 1] has variance 1/3; interior bins of white noise carry 2/L of it
    interior = psd[1:-1] * length / 2 * 3
    assert abs(interior.mean() - 1.0) <= 0.02
    assert interior.min() >= 0.5 and interior.max() <= 1.6


def test_expert_dataset_spectrum_is_low_frequency_dominant(tmp_path):
    length = 500
    cfg = harness.build_config(overrides={"n_traj": "40", "traj_len": str(length), "psd_sequences": "40",
                                          "psd_len": str(length), "data_seed": "3"})
    path = harness.run_collect(cfg, tmp_path / "dataset.csv")
    spectra = harness.run_psd(cfg, tmp_path / "psd.csv", None, str(path))
    psd = spectra["dataset"]
    # a bounded room caps the net displacement, so the mean action (bin 0) is small; the
    # power sits at the goal-switching frequency, which is still within the lowest tenth
    assert int(np.argmax(psd)) < 0.1 * len(psd)
    assert metrics.low_frequency_fraction(psd, 0.1) >= 0.5
    assert metrics.low_frequency_fraction(psd, 0.1) >= 3 * metrics.low_frequency_fraction(spectra["uniform"], 0.1)
