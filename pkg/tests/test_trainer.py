import json
from collections import deque

import numpy as np
import pytest

from langworld import minibench as mb
from langworld.config import desk_config
from langworld.episodes import Episode
from langworld.lexicon import TASKS, generate_synthetic, task_by_name
from langworld.trainer import (
    BufferSet, MixPolicy, StagePlan, Trainer, online_probabilities, online_ratio,
    relabel, sample_goal, sample_online, stage_for_epoch,
)


def tiny_config(**train_overrides):
    cfg = desk_config()
    cfg.env.tasks = ("turn_on_led", "turn_on_lightbulb")
    cfg.data.n_episodes = 10
    cfg.train.n_t, cfg.train.n_w, cfg.train.n_f = 1, 1, 1
    cfg.train.total_epochs = 4
    cfg.train.steps_per_epoch = 2
    cfg.train.n_rollout = 2
    cfg.train.batch_tokenizer = 4
    cfg.train.batch_wm = 4
    cfg.train.batch_ac = 2
    cfg.train.imagination_horizon = 3
    for k, v in train_overrides.items():
        setattr(cfg.train, k, v)
    return cfg


def play_episode(seed=0, horizon=12):
    return mb.run_scripted_episode([seed, 0], horizon)


class TestStageSchedule:
    def test_pure_function_of_epoch(self):
        plan = StagePlan(n_t=3, n_w=3, n_f=2, steps_per_epoch=50, total_epochs=12)
        stages = [stage_for_epoch(e, plan) for e in range(12)]
        assert stages[:3] == ["tokenizer"] * 3
        assert stages[3:6] == ["worldmodel"] * 3
        assert stages[6:8] == ["worldmodel_filtered"] * 2
        assert stages[8:] == ["joint"] * 4


class TestOnlineRatio:
    def _buffer(self, n, n_max=5000):
        b = BufferSet([], [], n_max)
        b.online = deque([None] * n, maxlen=n_max)
        return b

    def test_empty_is_zero(self):
        mix = MixPolicy(0.5, 0.15, (1,) * 6, 120, 5000)
        assert online_ratio(self._buffer(0), mix) == 0.0

    def test_half_full(self):
        mix = MixPolicy(0.5, 0.15, (1,) * 6, 120, 5000)
        assert online_ratio(self._buffer(2500), mix) == pytest.approx(0.25)

    def test_saturates_at_p_max(self):
        mix = MixPolicy(0.5, 0.15, (1,) * 6, 120, 5000)
        assert online_ratio(self._buffer(5000), mix) == pytest.approx(0.5)


class TestOnlineProbabilities:
    def test_eight_episodes(self):
        p = online_probabilities(8)
        np.testing.assert_allclose(p, [0.0625] * 4 + [0.125] * 2 + [0.25] * 2)
        assert p.sum() == pytest.approx(1.0)

    def test_four_episodes(self):
        np.testing.assert_allclose(online_probabilities(4), [0.125, 0.125, 0.25, 0.5])

    def test_remainder_goes_to_early_quarters(self):
        p = online_probabilities(10)  # quarter sizes 3,3,2,2
        np.testing.assert_allclose(p[:6], [0.25 / 6] * 6)
        np.testing.assert_allclose(p[6:8], [0.125] * 2)
        np.testing.assert_allclose(p[8:], [0.25] * 2)

    def test_small_buffers_renormalize(self):
        np.testing.assert_allclose(online_probabilities(1), [1.0])
        np.testing.assert_allclose(online_probabilities(2), [0.5, 0.5])
        np.testing.assert_allclose(online_probabilities(3), [0.25, 0.25, 0.5])

    def test_empirical_frequencies_within_2pct(self):
        buf = BufferSet([], [], 100)
        buf.online = deque(range(8), maxlen=100)
        rng = np.random.default_rng(0)
        draws = sample_online(buf, rng, 10_000)
        want = online_probabilities(8)
        for i in range(8):
            freq = draws.count(i) / 10_000
            assert abs(freq - want[i]) < 0.02

    def test_empty_buffer_errors(self):
        buf = BufferSet([], [], 10)
        with pytest.raises(ValueError, match="empty"):
            sample_online(buf, np.random.default_rng(0), 1)


class TestRelabel:
    def setup_method(self):
        self.embeddings = generate_synthetic(0, 16, 4, 0.1)
        self.rng = np.random.default_rng(1)

    def test_relabel_to_own_task_is_identity_on_rewards(self):
        ep = play_episode(seed=3)
        out = relabel(ep, self.rng, list(TASKS), self.embeddings, task=ep.task)
        np.testing.assert_array_equal(out.rewards, ep.rewards)
        np.testing.assert_array_equal(out.dones, ep.dones)

    def test_relabel_recomputes_success_flags(self):
        # find an episode that opens the drawer but never touches the led
        ep = None
        for seed in range(60):
            cand = play_episode(seed=seed, horizon=20)
            if "open_drawer" in cand.completed and "turn_on_led" not in cand.completed:
                ep = cand
                break
        assert ep is not None
        out = relabel(ep, self.rng, list(TASKS), self.embeddings,
                      task=task_by_name("turn_on_led"))
        assert not out.dones.any()
        r, d = mb.episode_rewards(ep.states, task_by_name("turn_on_led"))
        np.testing.assert_array_equal(out.rewards, r.astype(np.float32))

    def test_relabel_uniform_over_tasks(self):
        ep = play_episode(seed=4)
        rng = np.random.default_rng(2)
        counts = {t.name: 0 for t in TASKS}
        n = 6000
        for _ in range(n):
            task = TASKS[int(rng.integers(len(TASKS)))]
            counts[task.name] += 1
        for c in counts.values():
            assert abs(c / n - 1 / 6) < 0.02

    def test_missing_states_error(self):
        ep = play_episode(seed=5)
        ep.states = np.zeros((0, 7), np.float32)
        with pytest.raises(ValueError, match="raw states"):
            relabel(ep, self.rng, list(TASKS), self.embeddings)

    def test_instruction_resampled_from_new_task(self):
        ep = play_episode(seed=6)
        out = relabel(ep, self.rng, [task_by_name("turn_on_led")], self.embeddings)
        assert out.task.name == "turn_on_led"
        assert "turn_on_led" in out.instruction_text


class TestGoalRandomization:
    def test_keep_probability_and_weights(self):
        mix = MixPolicy(0.5, 0.15, (1, 1, 1, 1, 2 / 3, 2 / 3), 120, 5000)
        rng = np.random.default_rng(3)
        own = task_by_name("open_drawer")
        n = 20_000
        kept = 0
        alt_counts = np.zeros(6)
        for _ in range(n):
            goal = sample_goal(own, rng, list(TASKS), mix)
            if goal == own:
                kept += 1  # includes resamples landing on the own task
            alt_counts[goal.index] += 1
        assert abs(kept / n - (0.85 + 0.15 * (1 / np.sum([1, 1, 1, 1, 2/3, 2/3])))) < 0.02

    def test_alternative_frequencies_match_weights(self):
        # force resampling every time to isolate the weighted draw
        mix = MixPolicy(0.5, 1.0, (1, 1, 1, 1, 2 / 3, 2 / 3), 120, 5000)
        rng = np.random.default_rng(4)
        own = task_by_name("open_drawer")
        n = 10_000
        counts = np.zeros(6)
        for _ in range(n):
            counts[sample_goal(own, rng, list(TASKS), mix).index] += 1
        w = np.array([1, 1, 1, 1, 2 / 3, 2 / 3])
        w /= w.sum()
        for i in range(6):
            assert abs(counts[i] / n - w[i]) < 0.02


class TestBufferBound:
    def test_fifo_eviction_oldest_first(self):
        buf = BufferSet([], [], n_max=5)
        for i in range(8):
            buf.online.append(i)
        assert len(buf.online) == 5
        assert list(buf.online) == [3, 4, 5, 6, 7]


class TestTrainerRuns:
    def test_smoke_run_stage_markers_and_checkpoint(self, tmp_path):
        cfg = tiny_config()
        trainer = Trainer(cfg, seed=0, out_dir=tmp_path / "run")
        trainer.prepare_data()
        trainer.run()
        lines = [json.loads(l) for l in (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
        transitions = [l for l in lines if l["event"] == "stage_transition"]
        assert len(transitions) >= 3
        epochs = [l for l in lines if l["event"] == "epoch"]
        assert len(epochs) == cfg.train.total_epochs
        assert (tmp_path / "run" / "checkpoint" / "params.lw").exists()
        assert (tmp_path / "run" / "metrics.csv").exists()
        for rec in epochs:
            assert 0.0 <= rec["p_online"] <= cfg.train.p_max
            assert rec["buffer_size"] <= cfg.train.n_max

    def test_no_rollouts_keeps_p_online_zero(self, tmp_path):
        cfg = tiny_config(n_rollout=0)
        trainer = Trainer(cfg, seed=0, out_dir=tmp_path / "run")
        trainer.prepare_data()
        trainer.run()
        lines = [json.loads(l) for l in (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
        for rec in lines:
            if rec["event"] == "epoch":
                assert rec["p_online"] == 0.0

    def test_filtered_subset_tasks_consistent(self):
        cfg = tiny_config()
        trainer = Trainer(cfg, seed=1, out_dir="/tmp/lwtest_unused")
        trainer.prepare_data()
        task_names = {t.name for t in trainer.system.tasks}
        for ep in trainer.buffers.filtered:
            assert ep.task.name in task_names
            assert ep.task.name in ep.completed
            r, d = mb.episode_rewards(ep.states, ep.task)
            np.testing.assert_array_equal(ep.rewards, r.astype(np.float32))

    def test_mbrl_st_restricts_tasks(self, tmp_path):
        cfg = tiny_config()
        cfg.variant = "mbrl_st"
        cfg.env.tasks = ("turn_on_led",)
        trainer = Trainer(cfg, seed=2, out_dir=tmp_path / "st")
        trainer.prepare_data()
        trainer.run()
        assert [t.name for t in trainer.system.tasks] == ["turn_on_led"]
        for ep in trainer.buffers.online:
            assert ep.task.name == "turn_on_led"
