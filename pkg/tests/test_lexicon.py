import json

import numpy as np
import pytest

from langworld import lexicon as lx


def test_task_registry_order():
    assert [t.name for t in lx.TASKS] == list(lx.TASK_NAMES)
    assert [t.index for t in lx.TASKS] == list(range(6))
    with pytest.raises(KeyError):
        lx.task_by_name("paint_the_fence")


class TestSynthetic:
    def test_zero_noise_collapses_clusters(self):
        es = lx.generate_synthetic(seed=0, dim=16, per_task=3, noise=0.0)
        for task in lx.TASKS:
            vecs = [e.vec for e in es.entries if e.task == task]
            for v in vecs[1:]:
                np.testing.assert_allclose(v, vecs[0])
            assert abs(np.linalg.norm(vecs[0]) - 1.0) < 1e-9

    def test_unit_norm_all(self):
        es = lx.generate_synthetic(seed=3, dim=16, per_task=4, noise=0.1)
        for e in es.entries:
            assert abs(np.linalg.norm(e.vec) - 1.0) < 1e-6

    def test_cluster_separation_by_enumeration(self):
        es = lx.generate_synthetic(seed=7, dim=16, per_task=8, noise=0.1)
        within, cross = lx.cosine_separation(es)
        assert within > cross

    def test_entry_counts(self):
        es = lx.generate_synthetic(seed=1, dim=8, per_task=8, noise=0.1)
        assert len(es.entries) == 6 * 9
        assert lx.validate(es) == []

    def test_extreme_noise_warns_not_fails(self):
        with pytest.warns(UserWarning, match="washes out"):
            lx.generate_synthetic(seed=2, dim=4, per_task=4, noise=100.0)

    def test_bad_args(self):
        with pytest.raises(ValueError):
            lx.generate_synthetic(0, dim=1, per_task=4, noise=0.1)
        with pytest.raises(ValueError):
            lx.generate_synthetic(0, dim=8, per_task=1, noise=0.1)


class TestFixtureIO:
    def test_round_trip_bit_exact(self, tmp_path):
        es = lx.generate_synthetic(seed=5, dim=16, per_task=3, noise=0.05)
        path = tmp_path / "emb.json"
        lx.save_fixture(es, path)
        loaded = lx.load_fixture(path)
        assert loaded.dim == es.dim
        assert loaded.provenance == "imported"
        for a, b in zip(es.entries, loaded.entries):
            assert (a.task, a.text, a.split) == (b.task, b.text, b.split)
            assert a.vec.tobytes() == b.vec.astype(a.vec.dtype).tobytes()

    def test_counts_example(self, tmp_path):
        rng = np.random.default_rng(0)
        entries = []
        for task in lx.TASK_NAMES:
            for k in range(8):
                v = rng.standard_normal(384)
                entries.append({"task": task, "text": f"t{k} {task}", "split": "train",
                                "vec": list(v / np.linalg.norm(v))})
            v = rng.standard_normal(384)
            entries.append({"task": task, "text": f"val {task}", "split": "validation",
                            "vec": list(v / np.linalg.norm(v))})
        path = tmp_path / "f.json"
        path.write_text(json.dumps({"format": 1, "dim": 384, "entries": entries}))
        es = lx.load_fixture(path)
        assert len(es.entries) == 54
        assert es.dim == 384

    def test_zero_vector_rejected(self, tmp_path):
        doc = {"format": 1, "dim": 3, "entries": [
            {"task": "open_drawer", "text": "x", "split": "train", "vec": [0, 0, 0]}]}
        path = tmp_path / "z.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(lx.FixtureError, match="norm"):
            lx.load_fixture(path)

    def test_dimension_mismatch_names_entry(self, tmp_path):
        doc = {"format": 1, "dim": 3, "entries": [
            {"task": "open_drawer", "text": "short one", "split": "train", "vec": [1.0, 0.0]}]}
        path = tmp_path / "d.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(lx.FixtureError, match="short one"):
            lx.load_fixture(path)

    def test_missing_validation_rejected(self, tmp_path):
        es = lx.generate_synthetic(seed=5, dim=8, per_task=3, noise=0.05)
        es.entries = [e for e in es.entries if not (e.task.name == "turn_on_led" and e.split == "validation")]
        path = tmp_path / "m.json"
        lx.save_fixture(es, path)
        with pytest.raises(lx.FixtureError, match="turn_on_led"):
            lx.load_fixture(path)

    def test_duplicate_rejected(self, tmp_path):
        es = lx.generate_synthetic(seed=5, dim=8, per_task=3, noise=0.05)
        es.entries.append(es.entries[0])
        path = tmp_path / "dup.json"
        lx.save_fixture(es, path)
        with pytest.raises(lx.FixtureError, match="duplicate"):
            lx.load_fixture(path)

    def test_near_unit_renormalized(self, tmp_path):
        es = lx.generate_synthetic(seed=5, dim=8, per_task=2, noise=0.0)
        doc = json.loads((lambda p: (lx.save_fixture(es, p), p.read_text())[1])(tmp_path / "n.json"))
        doc["entries"][0]["vec"] = [v * (1 + 5e-4) for v in doc["entries"][0]["vec"]]
        path = tmp_path / "n2.json"
        path.write_text(json.dumps(doc))
        loaded = lx.load_fixture(path)
        assert abs(np.linalg.norm(loaded.entries[0].vec) - 1.0) < 1e-9


class TestPickInstruction:
    def test_validation_is_singleton(self):
        es = lx.generate_synthetic(seed=9, dim=8, per_task=4, noise=0.1)
        task = lx.task_by_name("turn_on_led")
        rng = np.random.default_rng(0)
        e1 = lx.pick_instruction(es, task, "validation", rng)
        e2 = lx.pick_instruction(es, task, "validation", rng)
        assert e1 is e2
        assert e1.split == "validation"

    def test_train_uniform_within_2pct(self):
        es = lx.generate_synthetic(seed=9, dim=8, per_task=5, noise=0.1)
        task = lx.task_by_name("open_drawer")
        rng = np.random.default_rng(1)
        counts = {}
        n = 10_000
        for _ in range(n):
            e = lx.pick_instruction(es, task, "train", rng)
            counts[e.text] = counts.get(e.text, 0) + 1
        assert len(counts) == 5
        for c in counts.values():
            assert abs(c / n - 0.2) < 0.02

    def test_unknown_selection_errors(self):
        es = lx.generate_synthetic(seed=9, dim=8, per_task=2, noise=0.1)
        es.entries = [e for e in es.entries if e.task.name != "close_drawer"]
        es._index()
        with pytest.raises(KeyError):
            lx.pick_instruction(es, lx.task_by_name("close_drawer"), "train", np.random.default_rng(0))


class TestIntegerIds:
    def test_first_task_dim4(self):
        v = lx.integer_id_embedding(lx.TASKS[0], 4)
        np.testing.assert_allclose(v, [0.5, 0.5, 0.5, 0.5])

    def test_unit_norm_and_degenerate_cosine(self):
        vs = [lx.integer_id_embedding(t, 16) for t in lx.TASKS]
        for a in vs:
            assert abs(np.linalg.norm(a) - 1.0) < 1e-9
        # collinear by construction: cosine 1 between every pair
        for a in vs:
            for b in vs:
                assert abs(np.dot(a, b) - 1.0) < 1e-9

    def test_prenormalization_magnitudes_differ(self):
        raw = [np.full(8, t.index + 1.0) for t in lx.TASKS]
        mags = {float(np.linalg.norm(r)) for r in raw}
        assert len(mags) == 6
