import dataclasses
import itertools

import numpy as np
import pytest

from seqground import taskgen
from seqground.taskgen import GenSpec, SpecError


@pytest.fixture(scope="module")
def default_tasks():
    spec = GenSpec(n_tasks=300, seed=11)
    return spec, taskgen.generate(spec)


def test_generated_tasks_respect_invariants(default_tasks):
    spec, tasks = default_tasks
    for task in tasks:
        n = task.n_steps
        assert 2 <= n <= 10
        assert len(task.targets) == len(task.step_refs) == n
        assert all(0 <= o < task.scene.object_count for o in task.targets)
        assert task.step_refs[0]["kind"] == "direct"
        for t, ref in enumerate(task.step_refs):
            if ref["kind"] == "backref":
                assert 1 <= ref["depth"] <= t
                assert task.targets[t] == task.targets[t - ref["depth"]]


def test_audit_clean_and_blind_oracle_near_chance(default_tasks):
    spec, tasks = default_tasks
    rep = taskgen.solvability_audit(tasks, spec.vocab, spec.distractors)
    assert rep.ok, rep.to_dict()
    assert rep.ambiguous_direct == []
    assert rep.mean_backref_candidates == spec.distractors
    assert rep.n_backref > 100


def test_history_blind_strategies_cannot_beat_one_over_d(default_tasks):
    """Exhaustive over a family of deterministic blind rules: pick the m-th candidate."""
    spec, tasks = default_tasks
    d = spec.distractors
    steps = [(task, t) for task in tasks if task.scene.object_count <= 12
             for t, r in enumerate(task.step_refs) if r["kind"] == "backref"]
    n = len(steps)
    for m in range(d):
        hits = sum(taskgen.attribute_candidates(task.scene, task.steps[t], spec.vocab)[m] == task.targets[t]
                   for task, t in steps)
        # binomial 3-sigma band around 1/d
        assert hits / n <= 1 / d + 3 * np.sqrt((1 / d) * (1 - 1 / d) / n)
    # any blind rule sees the same candidate set; the target is uniform over its members
    positions = np.bincount([taskgen.attribute_candidates(task.scene, task.steps[t], spec.vocab).index(task.targets[t])
                             for task, t in steps], minlength=d)
    assert positions.max() / n <= 1 / d + 3 * np.sqrt((1 / d) * (1 - 1 / d) / n)


def test_no_backrefs_means_blind_matcher_is_perfect():
    spec = GenSpec(n_tasks=100, backref_rate=0.0, seed=2)
    tasks = taskgen.generate(spec)
    for task in tasks:
        assert all(r["kind"] == "direct" for r in task.step_refs)
        preds = [taskgen.history_blind_predict(task.scene, s, spec.vocab) for s in task.steps]
        assert preds == task.targets


def test_two_step_tasks_only_have_depth_one():
    spec = GenSpec(n_tasks=200, step_probs={2: 1.0}, backref_rate=1.0, seed=3)
    depths = {r["depth"] for t in taskgen.generate(spec) for r in t.step_refs if r["kind"] == "backref"}
    assert depths == {1}


def test_long_range_suite_has_depth_at_least_two():
    spec = GenSpec(n_tasks=200, min_depth=2, seed=4)
    depths = [r["depth"] for t in taskgen.generate(spec) for r in t.step_refs if r["kind"] == "backref"]
    assert depths and min(depths) >= 2


def test_regeneration_is_byte_identical(tmp_path):
    spec = GenSpec(n_tasks=100, seed=42)
    taskgen.serialize(taskgen.generate(spec), tmp_path / "a.jsonl", spec.vocab)
    taskgen.serialize(taskgen.generate(spec), tmp_path / "b.jsonl", spec.vocab)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_tasks_depend_only_on_seed_and_index():
    spec = GenSpec(n_tasks=30, seed=5)
    full = taskgen.generate(spec)
    assert taskgen.generate_task(spec, 17) == full[17]
    assert taskgen.generate(dataclasses.replace(spec, seed=6))[0] != full[0]


@pytest.mark.parametrize("bad,match", [
    (dict(n_colors=2), "Direct steps would not be unique"),
    (dict(step_probs={2: 0.5, 3: 0.4}), "sum to 1"),
    (dict(step_probs={1: 1.0}), r"\[2, 10\]"),
    (dict(distractors=1), "distractors"),
    (dict(min_objects=8, max_objects=6), "object range"),
    (dict(n_categories=5), "n_categories"),
    (dict(backref_rate=1.5), "backref_rate"),
])
def test_unsatisfiable_specs_rejected(bad, match):
    with pytest.raises(SpecError, match=match):
        taskgen.generate(GenSpec(n_tasks=5, **bad))


def test_audit_flags_duplicated_attributes(default_tasks):
    spec, tasks = default_tasks
    task = next(t for t in tasks if t.step_refs[0]["kind"] == "direct")
    record = task.to_record()
    tgt = task.targets[0]
    other = next(i for i in range(task.scene.object_count) if i != tgt)
    record["categories"][other] = record["categories"][tgt]
    record["colors"][other] = record["colors"][tgt]
    corrupt = taskgen.TaskSample.from_record(record)
    rep = taskgen.solvability_audit([corrupt], spec.vocab)
    assert (task.task_id, 0) in rep.ambiguous_direct
    assert not rep.ok


def test_audit_500_tasks_is_fast():
    spec = GenSpec(n_tasks=500, seed=7)
    rep = taskgen.solvability_audit(taskgen.generate(spec), spec.vocab)
    assert rep.ok
    assert rep.seconds < 5.0


# -- file format ------------------------------------------------------------


def test_round_trip(tmp_path, default_tasks):
    spec, tasks = default_tasks
    path = tmp_path / "tasks.jsonl"
    taskgen.serialize(tasks, path, spec.vocab)
    loaded, vocab = taskgen.loads(path.read_text())
    assert vocab == spec.vocab
    assert loaded == tasks
    assert all(np.array_equal(a.scene.object_features, b.scene.object_features) for a, b in zip(loaded, tasks))


def test_empty_file_missing_header(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    with pytest.raises(taskgen.DatasetFormatError, match="missing header"):
        taskgen.deserialize(tmp_path / "e.jsonl")


def test_truncated_final_record_names_index(tmp_path, default_tasks):
    spec, tasks = default_tasks
    text = taskgen.dumps(tasks[:5], spec.vocab)
    (tmp_path / "t.jsonl").write_text(text[: text.rstrip("\n").rfind(",")])
    with pytest.raises(taskgen.DatasetFormatError, match="record 4"):
        taskgen.deserialize(tmp_path / "t.jsonl")


def test_missing_trailing_record_detected(default_tasks):
    spec, tasks = default_tasks
    lines = taskgen.dumps(tasks[:5], spec.vocab).splitlines()
    with pytest.raises(taskgen.DatasetFormatError, match="record 4 missing"):
        taskgen.loads("\n".join(lines[:-1]) + "\n")


def test_schema_version_mismatch(default_tasks):
    spec, tasks = default_tasks
    text = taskgen.dumps(tasks[:2], spec.vocab).replace('"version": 1', '"version": 99', 1)
    with pytest.raises(taskgen.DatasetFormatError, match="schema version 99"):
        taskgen.loads(text)


def test_malformed_record_reports_line(default_tasks):
    spec, tasks = default_tasks
    lines = taskgen.dumps(tasks[:3], spec.vocab).splitlines()
    lines[2] = '{"task_id": 1}'
    with pytest.raises(taskgen.DatasetFormatError, match="line 3: malformed record 1"):
        taskgen.loads("\n".join(lines))


def test_split_is_disjoint_and_deterministic(default_tasks):
    _, tasks = default_tasks
    tr, ev = taskgen.split(tasks, 0)
    assert len(tr) == 240 and len(ev) == 60
    ids = [t.task_id for t in itertools.chain(tr, ev)]
    assert sorted(ids) == list(range(300))
    assert [t.task_id for t in taskgen.split(tasks, 0)[1]] == [t.task_id for t in ev]
