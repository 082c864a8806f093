import json

import numpy as np
import pytest

from langworld import lexicon as lx
from langworld import minibench as mb
from langworld.cli import main as cli_main
from langworld.config import config_from_dict, desk_config, load_config, paper_config
from langworld.harness import SwitchSchedule, decode_imagination, evaluate, run_schedule
from langworld.system import build_system, collect_episode, load_checkpoint, save_checkpoint


def small_system(seed=0, tasks=("turn_on_led", "turn_on_lightbulb"), variant="limt"):
    cfg = desk_config()
    cfg.env.tasks = tasks
    cfg.env.episode_len = 12
    cfg.variant = variant
    return build_system(cfg, seed)


class TestConfig:
    def test_desk_profile_pins(self):
        cfg = desk_config()
        assert (cfg.train.n_t, cfg.train.n_w, cfg.train.n_f) == (3, 3, 2)
        assert cfg.train.steps_per_epoch == 50
        assert cfg.train.n_rollout == 12 and cfg.train.n_max == 200
        assert cfg.env.episode_len == 30
        assert cfg.tokenizer.vocab_size == 64 and cfg.tokenizer.embed_dim == 32
        assert cfg.wm.horizon == 8 and cfg.wm.d_model == 64 and cfg.wm.n_layers == 2
        assert cfg.wm.reward_loss_factor == 10.0
        assert cfg.agent.lam == 0.9 and cfg.agent.gamma == 0.65
        assert cfg.agent.proprio_repeat == 10

    def test_paper_profile_pins(self):
        cfg = paper_config()
        assert cfg.tokenizer.vocab_size == 512 and cfg.tokenizer.embed_dim == 512
        assert cfg.tokenizer.image_tokens == 16
        assert cfg.wm.d_model == 512 and cfg.wm.n_layers == 10 and cfg.wm.n_heads == 4
        assert cfg.agent.hidden_layers == 9 and cfg.agent.hidden_units == 2048
        assert cfg.agent.critic_sync_interval == 200
        assert cfg.agent.entropy_weight == 1e-4
        assert cfg.train.batch_tokenizer == 64 and cfg.train.batch_wm == 128
        assert cfg.train.batch_ac == 120 and cfg.train.steps_per_epoch == 200
        assert (cfg.train.n_t, cfg.train.n_w, cfg.train.n_f) == (200, 100, 50)
        assert cfg.train.relabel_prob == 0.15 and cfg.train.p_max == 0.5
        assert cfg.train.n_rollout == 120 and cfg.train.n_max == 5000
        assert cfg.env.episode_len == 50
        np.testing.assert_allclose(cfg.train.task_weights, [1, 1, 1, 1, 2 / 3, 2 / 3])

    def test_overrides_and_errors(self):
        cfg = config_from_dict({"profile": "desk", "wm": {"n_layers": 3}, "seed": 5})
        assert cfg.wm.n_layers == 3 and cfg.seed == 5
        with pytest.raises(KeyError, match="unknown config key wm.bogus"):
            config_from_dict({"profile": "desk", "wm": {"bogus": 1}})
        with pytest.raises(KeyError, match="unknown profile"):
            config_from_dict({"profile": "gpu"})
        with pytest.raises(ValueError, match="variant"):
            config_from_dict({"profile": "desk", "variant": "nope"})

    def test_resolve_propagates_shared_dims(self):
        cfg = config_from_dict({"profile": "desk", "tokenizer": {"vocab_size": 32},
                                "embeddings": {"dim": 8}})
        assert cfg.wm.vocab_size == 32
        assert cfg.agent.instr_dim == 8 and cfg.wm.instr_dim == 8

    def test_roundtrip(self, tmp_path):
        from langworld.config import save_config
        cfg = desk_config()
        cfg.train.total_epochs = 99
        save_config(cfg, tmp_path / "c.json")
        loaded = load_config(tmp_path / "c.json")
        assert loaded.train.total_epochs == 99


class TestVariantWiring:
    def test_limt_uses_language(self):
        s = small_system(variant="limt")
        rng = np.random.default_rng(0)
        task = lx.task_by_name("turn_on_led")
        vec = s.instruction(task, "validation", rng, "wm")
        entry = lx.pick_instruction(s.embeddings, task, "validation", rng)
        np.testing.assert_array_equal(vec, entry.vec)

    def test_limt_nl_integer_everywhere(self):
        s = small_system(variant="limt_nl")
        rng = np.random.default_rng(0)
        task = lx.task_by_name("turn_on_led")
        want = lx.integer_id_embedding(task, s.cfg.embeddings.dim)
        np.testing.assert_array_equal(s.instruction(task, "train", rng, "wm"), want)
        np.testing.assert_array_equal(s.instruction(task, "train", rng, "ac"), want)

    def test_limt_nlac_integer_only_in_policy(self):
        s = small_system(variant="limt_nlac")
        rng = np.random.default_rng(0)
        task = lx.task_by_name("turn_on_lightbulb")
        want = lx.integer_id_embedding(task, s.cfg.embeddings.dim)
        np.testing.assert_array_equal(s.instruction(task, "train", rng, "ac"), want)
        wm_vec = s.instruction(task, "train", rng, "wm")
        assert not np.array_equal(wm_vec, want)


class TestSystemCheckpoint:
    def test_parameter_names(self):
        s = small_system()
        names = set(s.parameters())
        assert "codebook.image" in names and "codebook.proprio" in names
        assert any(n.startswith("wm.") for n in names)
        assert any(n.startswith("actor.") for n in names)
        assert any(n.startswith("critic_target.") for n in names)

    def test_roundtrip_preserves_behavior(self, tmp_path):
        s = small_system(seed=3)
        save_checkpoint(s, tmp_path / "ck", meta={"note": "test"})
        loaded = load_checkpoint(tmp_path / "ck")
        r1 = evaluate(s, n_eval=2, seed=5)
        r2 = evaluate(loaded, n_eval=2, seed=5)
        assert r1.to_dict() == r2.to_dict()

    def test_collect_episode_consistency(self):
        s = small_system(seed=4)
        rng = np.random.default_rng(6)
        task = lx.task_by_name("turn_on_led")
        ep = collect_episode(s, task, rng)
        assert ep.length == s.cfg.env.episode_len
        assert ep.task == task
        r, d = mb.episode_rewards(ep.states, task)
        np.testing.assert_array_equal(ep.rewards, r.astype(np.float32))


class TestEvaluate:
    def test_multi_task_rate_is_exact_mean(self):
        s = small_system(seed=7)
        rep = evaluate(s, n_eval=2, seed=8)
        want = np.mean(list(rep.per_task.values()))
        assert abs(rep.multi_task - want) < 1e-12

    def test_reproducible_given_seed(self):
        s = small_system(seed=9)
        assert evaluate(s, 2, seed=1).to_dict() == evaluate(s, 2, seed=1).to_dict()

    def test_hand_mean_example(self):
        rates = (1, 0, 0, 0, 0, 0)
        assert np.mean(rates) == pytest.approx(1 / 6)


class TestSchedule:
    def test_validation(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            SwitchSchedule([(5, "turn_on_led"), (5, "turn_on_lightbulb")])
        with pytest.raises(KeyError):
            SwitchSchedule([(0, "fly_to_moon")])

    def test_timestep_beyond_episode_errors(self):
        s = small_system()
        sched = SwitchSchedule([(40, "turn_on_led")])
        with pytest.raises(ValueError, match=">= episode length"):
            run_schedule(s, sched, seed=0)

    def test_empty_schedule_is_single_task(self):
        s = small_system()
        tr = run_schedule(s, SwitchSchedule([]), seed=0)
        tasks = {step["active_task"] for step in tr.steps}
        assert tasks == {s.tasks[0].name}

    def test_swap_exact_at_step(self):
        s = small_system()
        sched = SwitchSchedule([(0, "turn_on_led"), (5, "turn_on_lightbulb")])
        tr = run_schedule(s, sched, seed=1)
        assert [st["active_task"] for st in tr.steps[:5]] == ["turn_on_led"] * 5
        assert tr.steps[5]["active_task"] == "turn_on_lightbulb"
        rng = np.random.default_rng(0)
        want = s.instruction(lx.task_by_name("turn_on_lightbulb"), "validation", rng, "ac")
        np.testing.assert_array_equal(tr.steps[5]["instruction"], want)

    def test_three_switches_no_reset(self):
        s = small_system(tasks=lx.TASK_NAMES)
        s.cfg.env.episode_len = 15
        sched = SwitchSchedule([(0, "turn_on_lightbulb"), (5, "move_slider_left"),
                                (10, "move_slider_right")])
        tr = run_schedule(s, sched, seed=2)
        assert len(tr.steps) == 15
        assert [st["active_task"] for st in tr.steps][::5] == [
            "turn_on_lightbulb", "move_slider_left", "move_slider_right"]


class TestDecodeImagination:
    def test_frame_count_and_determinism(self, tmp_path):
        s = small_system(seed=11)
        task = lx.task_by_name("turn_on_led")
        f1 = decode_imagination(s, task, 4, tmp_path / "a.png", seed=3)
        f2 = decode_imagination(s, task, 4, tmp_path / "b.png", seed=3)
        assert f1.shape[0] == 5
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_first_frame_is_reconstruction(self, tmp_path):
        s = small_system(seed=12)
        task = lx.task_by_name("turn_on_led")
        state = mb.reset()
        frames = decode_imagination(s, task, 2, tmp_path / "c.png", seed=4, start_state=state)
        image, proprio = mb.observe(state, s.cfg.env.image_size)
        tok = s.tokenizer.encode(image, proprio)
        want = np.clip(s.tokenizer.decode(tok)[0], 0.0, 1.0)
        np.testing.assert_array_equal(frames[0], want)


class TestCli:
    def test_gen_embed_train_eval_chain(self, tmp_path):
        data = tmp_path / "data"
        assert cli_main(["gen-data", "--seed", "3", "--episodes", "8", "--horizon", "12",
                         "--out", str(data)]) == 0
        emb = tmp_path / "emb.json"
        assert cli_main(["embed", "synth", "--out", str(emb), "--dim", "16",
                         "--per-task", "3"]) == 0
        cfgfile = tmp_path / "cfg.json"
        cfgfile.write_text(json.dumps({
            "profile": "desk",
            "env": {"tasks": ["turn_on_led"], "episode_len": 12},
            "train": {"n_t": 1, "n_w": 1, "n_f": 0, "total_epochs": 3,
                      "steps_per_epoch": 2, "n_rollout": 2, "batch_tokenizer": 4,
                      "batch_wm": 2, "batch_ac": 2, "imagination_horizon": 3},
        }))
        run = tmp_path / "run"
        assert cli_main(["train", "--config", str(cfgfile), "--data", str(data),
                         "--embeddings", str(emb), "--seed", "0", "--out", str(run)]) == 0
        report = tmp_path / "report.json"
        assert cli_main(["eval", "--checkpoint", str(run / "checkpoint"), "--n", "2",
                         "--seed", "1", "--out", str(report)]) == 0
        doc = json.loads(report.read_text())
        assert doc["n_eval"] == 2 and "turn_on_led" in doc["per_task"]

        sched = tmp_path / "sched.json"
        sched.write_text(json.dumps({"switches": [[0, "turn_on_led"], [5, "turn_on_lightbulb"]]}))
        transcript = tmp_path / "tr.json"
        assert cli_main(["rollout", "--checkpoint", str(run / "checkpoint"), "--schedule",
                         str(sched), "--out", str(transcript)]) == 0
        strip = tmp_path / "strip.png"
        assert cli_main(["decode-imagination", "--checkpoint", str(run / "checkpoint"),
                         "--task", "turn_on_led", "--horizon", "3", "--out", str(strip)]) == 0
        assert strip.exists()

    def test_exit_codes(self, tmp_path):
        assert cli_main(["no-such-command"]) == 1
        assert cli_main(["eval", "--checkpoint", str(tmp_path / "missing")]) == 2
        assert cli_main(["train", "--variant", "mbrl_st", "--out", str(tmp_path / "x")]) == 1
