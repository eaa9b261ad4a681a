import csv
import json
import time

import numpy as np
import pytest

from conftest import make_config
from pmisim import cli
from pmisim.bus import connect_tcp
from pmisim.config import BusConfig, ExperimentConfig
from pmisim.errors import ConfigError, ScenarioMismatchError, TrainingDivergedError
from pmisim.harness import (
    COMPARED_AGENTS,
    EVAL_EPISODE_OFFSET,
    METRICS_HEADER,
    Experiment,
    compare,
    dump_codebook,
    empirical_cdf,
    evaluate,
    hash_sequence,
    read_metrics,
    run_episode,
    summarize,
    train,
)
from pmisim.rl import A2cConfig, A2cLearner, Checkpoint
from pmisim.xapp import XApp


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def wait_for(condition, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if condition():
            return True
        time.sleep(0.01)
    return False


def test_run_episode_logs_one_row_per_tti():
    cfg = make_config(agent="follow_pmi")
    result = run_episode(Experiment(cfg), 0)
    assert [r.tti for r in result.rows] == [1, 2, 3, 4]
    assert len(result.realized) == 4
    # TTIs 0 through N+1 are realized
    assert len(result.channel_hashes) == cfg.ttis_per_episode + 2
    assert all(r.agent == "follow_pmi" for r in result.rows)
    assert all(a.effective_tti == a.issued_tti + 1 for a in result.applied)
    assert result.applied


def test_rewards_match_their_breakdown():
    cfg = make_config(agent="inter_a2c")
    exp = Experiment(cfg)
    exp.set_training(False)
    result = run_episode(exp, 0, greedy=True)
    for row in result.rows:
        expected = (
            (row.gamma_u - cfg.reward.target_se)
            - cfg.reward.alpha * row.interference_cost
            - abs(row.prb_util - cfg.reward.prb_target)
            + row.action_penalty
        )
        assert row.reward == pytest.approx(expected, rel=0.0, abs=1e-12)


def test_last_logged_decision_ends_the_episode(monkeypatch):
    cfg = make_config(agent="a2c")
    decide = XApp.decide

    def skip_last_tti(self, tti, greedy=False):
        decision = decide(self, tti, greedy=greedy)
        return None if tti == cfg.ttis_per_episode else decision

    batches = []
    make_batch = A2cLearner.make_batch

    def spy(self, trajectory, bootstrap_value):
        batches.append(([s.done for s in trajectory.steps], bootstrap_value))
        return make_batch(self, trajectory, bootstrap_value)

    monkeypatch.setattr(XApp, "decide", skip_last_tti)
    monkeypatch.setattr(A2cLearner, "make_batch", spy)
    exp = Experiment(cfg)
    result = run_episode(exp, 0)
    assert [r.tti for r in result.rows] == [1, 2, 3]
    assert batches == [([False, False, True], 0.0)]
    assert len(exp.agent.trajectory) == 0


def test_episodes_are_reproducible():
    cfg = make_config(agent="inter_a2c")
    runs = []
    for _ in range(2):
        exp = Experiment(cfg)
        result = run_episode(exp, 5)
        runs.append(([r.model_dump() for r in result.rows], result.channel_hashes))
    assert runs[0] == runs[1]


def test_evaluate_writes_reproducible_outputs(tmp_path):
    cfg = make_config(agent="follow_pmi")
    first = evaluate(cfg, out_dir=str(tmp_path / "a"))
    second = evaluate(cfg, out_dir=str(tmp_path / "b"))
    for name in ("metrics.csv", "cdf_se.csv", "cdf_thr.csv", "per_cell_se.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert first.summary == second.summary

    rows = read_rows(tmp_path / "a" / "metrics.csv")
    assert rows[0] == METRICS_HEADER
    assert len(rows) == 1 + cfg.eval_episodes * cfg.ttis_per_episode
    assert {r.episode for r in first.rows} == {
        EVAL_EPISODE_OFFSET,
        EVAL_EPISODE_OFFSET + 1,
    }
    assert len(read_rows(tmp_path / "a" / "per_cell_se.csv")) == 1 + 3


def test_summary_is_recomputable_from_metrics(tmp_path):
    cfg = make_config(agent="follow_pmi")
    result = evaluate(cfg, out_dir=str(tmp_path))
    rows = read_metrics(str(tmp_path / "metrics.csv"))
    assert rows == result.rows
    digest = hash_sequence(result.channel_hashes)
    recomputed = summarize(rows, "follow_pmi", cfg.eval_episodes, digest)
    with open(tmp_path / "summary.json") as f:
        assert json.load(f) == recomputed


def test_cdf_files_are_monotone(tmp_path):
    cfg = make_config(agent="follow_pmi")
    evaluate(cfg, out_dir=str(tmp_path))
    for name in ("cdf_se.csv", "cdf_thr.csv"):
        rows = read_rows(tmp_path / name)[1:]
        values = [float(v) for v, _ in rows]
        probs = [float(p) for _, p in rows]
        assert values == sorted(values)
        assert all(a < b for a, b in zip(probs, probs[1:]))
        assert probs[-1] == 1.0
        assert len(rows) == cfg.eval_episodes * cfg.ttis_per_episode * 9


def test_empirical_cdf():
    assert empirical_cdf([3.0, 1.0, 2.0, 2.0]) == [
        (1.0, 0.25),
        (2.0, 0.5),
        (2.0, 0.75),
        (3.0, 1.0),
    ]
    assert empirical_cdf([]) == []


def test_agents_see_the_same_channels(tmp_path):
    follow = evaluate(make_config(agent="follow_pmi"), out_dir=str(tmp_path / "f"))
    policy = evaluate(
        make_config(agent="inter_a2c"),
        out_dir=str(tmp_path / "p"),
        require_checkpoint=False,
    )
    assert follow.channel_hashes == policy.channel_hashes
    assert follow.summary["channel_digest"] == policy.summary["channel_digest"]


def test_train_writes_curve_and_checkpoint(tmp_path):
    cfg = make_config(agent="inter_a2c", episodes=3)
    path = train(cfg, str(tmp_path))
    curve = read_rows(tmp_path / "reward_curve.csv")
    assert curve[0] == ["episode", "mean_reward", "smoothed_reward"]
    assert [int(r[0]) for r in curve[1:]] == [0, 1, 2]
    assert float(curve[1][2]) == float(curve[1][1])
    assert float(curve[3][2]) == pytest.approx(
        (float(curve[2][1]) + float(curve[3][1])) / 2
    )

    ckpt = Checkpoint.load(path)
    assert ckpt.agent == "inter_a2c"
    result = evaluate(cfg, path, str(tmp_path / "eval"))
    assert len(result.rows) == cfg.eval_episodes * cfg.ttis_per_episode


def test_zero_learning_rate_training_keeps_initial_policy(tmp_path):
    cfg = make_config(agent="a2c", rl=A2cConfig(hidden=[16], learning_rate=0.0))
    initial = Experiment(cfg).agent.net.params.copy()
    path = train(cfg, str(tmp_path))
    assert np.array_equal(Checkpoint.load(path).to_net().params, initial)


def test_training_rejects_non_learning_agents(tmp_path):
    with pytest.raises(ConfigError):
        train(make_config(agent="follow_pmi"), str(tmp_path))


def test_evaluating_a_policy_needs_a_checkpoint(tmp_path):
    with pytest.raises(ConfigError):
        evaluate(make_config(agent="a2c"), out_dir=str(tmp_path))


def test_checkpoint_must_match_the_agent(tmp_path):
    path = train(make_config(agent="a2c", episodes=1), str(tmp_path))
    with pytest.raises(ConfigError):
        evaluate(make_config(agent="inter_a2c"), path, str(tmp_path / "eval"))


def test_divergence_dumps_state(tmp_path, monkeypatch):
    def diverge(self, batch):
        raise TrainingDivergedError("non-finite loss twice in a row")

    monkeypatch.setattr(A2cLearner, "update", diverge)
    with pytest.raises(TrainingDivergedError):
        train(make_config(agent="a2c"), str(tmp_path))
    Checkpoint.load(tmp_path / "diverged_state.json")


def compare_configs(**updates):
    return {kind: make_config(agent=kind, **updates) for kind in COMPARED_AGENTS}


def test_compare_writes_summary_and_deltas(tmp_path):
    table = compare(compare_configs(), str(tmp_path / "one"))
    assert [row["agent"] for row in table] == [
        "follow_pmi",
        "a2c",
        "inter_a2c",
        "inter_a2c-follow_pmi",
        "inter_a2c-a2c",
        "a2c-follow_pmi",
    ]
    by_agent = {row["agent"]: row for row in table}
    assert by_agent["a2c-follow_pmi"]["mean_se"] == pytest.approx(
        by_agent["a2c"]["mean_se"] - by_agent["follow_pmi"]["mean_se"]
    )
    assert len(read_rows(tmp_path / "one" / "comparison.csv")) == 7
    assert (tmp_path / "one" / "a2c" / "checkpoint_a2c.json").exists()

    again = compare(compare_configs(), str(tmp_path / "two"))
    assert again[0] == table[0]


def test_compare_refuses_different_scenarios(tmp_path):
    cfgs = compare_configs()
    cfgs["a2c"] = cfgs["a2c"].model_copy(
        update={"scenario": cfgs["a2c"].scenario.model_copy(update={"seed": 1})}
    )
    with pytest.raises(ScenarioMismatchError):
        compare(cfgs, str(tmp_path / "out"))
    assert not (tmp_path / "out").exists()

    del cfgs["a2c"]
    with pytest.raises(ConfigError):
        compare(cfgs, str(tmp_path / "out"))


def test_reports_reach_a_tcp_subscriber():
    cfg = make_config(agent="follow_pmi", bus=BusConfig(tcp_addr="127.0.0.1:0"))
    with Experiment(cfg) as exp:
        client = connect_tcp(exp.server.address, "csi.>")
        try:
            assert wait_for(lambda: exp.server.subscriber_count == 1)
            run_episode(exp, 0)
            expected = exp.sim.num_ues * cfg.ttis_per_episode
            received = client.receive(expected)
            assert len(received) == expected
            assert client.receive(1, timeout=0.2) == []
        finally:
            client.close()
    assert exp.server is None


def test_dump_codebook(tmp_path):
    path = tmp_path / "codebook.csv"
    assert dump_codebook(ExperimentConfig(), str(path)) == 192
    rows = read_rows(path)
    assert rows[0] == ["rank", "j", "i11", "i12", "i13", "i2", "entries"]
    assert len(rows) == 193
    assert len(json.loads(rows[1][6])) == 8 * 1


@pytest.fixture
def quiet_cli(monkeypatch):
    monkeypatch.setattr(cli, "configure_logging", lambda level: None)


SMALL = [
    "--set", "scenario.num_sites=1",
    "--set", "scenario.ues_per_cell=2",
    "--set", "ttis_per_episode=3",
    "--set", "rl.hidden=[16]",
]


def test_cli_run_and_dump(tmp_path, quiet_cli):
    out = str(tmp_path / "run")
    argv = ["run", "--agent", "follow_pmi", "--out", out, "--episodes", "1"]
    assert cli.main(argv + SMALL) == cli.EXIT_OK
    with open(tmp_path / "run" / "summary.json") as f:
        summary = json.load(f)
    assert summary["episodes"] == 1
    assert summary["decisions"] == 3

    out = str(tmp_path / "cb")
    assert cli.main(["dump-codebook", "--out", out]) == cli.EXIT_OK
    assert (tmp_path / "cb" / "codebook.csv").exists()


def test_cli_configuration_errors(tmp_path, quiet_cli):
    out = ["--out", str(tmp_path)]
    assert cli.main(["eval", "--agent", "a2c"] + out + SMALL) == cli.EXIT_CONFIG
    missing = str(tmp_path / "missing.yaml")
    assert cli.main(["run", "--config", missing] + out) == cli.EXIT_CONFIG
    assert cli.main(["run", "--set", "nosuch=1"] + out) == cli.EXIT_CONFIG
    assert cli.main(["train", "--agent", "follow_pmi"] + out + SMALL) == cli.EXIT_CONFIG
