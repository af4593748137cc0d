"""Task generators, serialization, few-shot sampling, accuracy."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xprompt import tasks
from xprompt.errors import ConfigError, DataError


def spec(kind="majority_class", **kw):
    base = dict(name="t", kind=kind, vocab_size=16, num_classes=2,
                seq_len_min=6, seq_len_max=10, train_size=40, dev_size=20, seed=9)
    base.update(kw)
    return tasks.TaskSpec(**base)


def test_generate_is_deterministic():
    a = tasks.generate(spec())
    b = tasks.generate(spec())
    assert a == b


def test_generate_seed_changes_data():
    a = tasks.generate(spec())
    b = tasks.generate(spec(seed=10))
    assert a != b


def test_splits_are_disjoint():
    data = tasks.generate(spec())
    train_seqs = {ex.tokens for ex in data["train"]}
    assert all(ex.tokens not in train_seqs for ex in data["dev"])


def test_class_balance_within_5pct():
    for kind in tasks.KINDS:
        data = tasks.generate(spec(kind=kind, train_size=64, dev_size=32))
        for split in data.values():
            counts = np.bincount([ex.label for ex in split], minlength=2)
            assert abs(counts[0] - counts[1]) <= 0.05 * len(split) + 1


def test_pattern_detect_against_independent_scan():
    data = tasks.generate(spec(kind="pattern_detect"))
    for ex in data["train"] + data["dev"]:
        a, b = tasks.PATTERN_BIGRAM
        found = any(x == a and y == b for x, y in zip(ex.tokens, ex.tokens[1:]))
        assert ex.label == int(found)


def test_majority_class_against_independent_counter():
    sp = spec(kind="majority_class", vocab_size=20, num_classes=3, train_size=30, dev_size=12)
    groups = tasks.majority_groups(sp)
    for ex in tasks.generate(sp)["train"]:
        counts = [sum(t in g for t in ex.tokens) for g in groups]
        assert counts[ex.label] == max(counts)
        assert counts.count(max(counts)) == 1


def test_parity_against_independent_counter():
    data = tasks.generate(spec(kind="parity_of_markers"))
    for ex in data["train"] + data["dev"]:
        assert ex.label == sum(t == tasks.PARITY_MARKER for t in ex.tokens) % 2


def test_tokens_in_range_and_reserved_ids_unused():
    for kind in tasks.KINDS:
        data = tasks.generate(spec(kind=kind))
        for ex in data["train"] + data["dev"]:
            assert all(tasks.RESERVED_SYMBOLS <= t < 16 for t in ex.tokens)
            assert spec().seq_len_min <= len(ex.tokens) <= spec().seq_len_max


def test_infeasible_spec_rejected():
    with pytest.raises(ConfigError):
        tasks.generate(spec(kind="pattern_detect", seq_len_min=1, seq_len_max=1))
    with pytest.raises(ConfigError):
        tasks.generate(spec(vocab_size=7))
    with pytest.raises(ConfigError):
        tasks.generate(spec(kind="parity_of_markers", num_classes=3))
    with pytest.raises(ConfigError):
        tasks.generate(spec(kind="no_such_kind"))


# --- jsonl ---------------------------------------------------------------------


def test_jsonl_round_trip(tmp_path):
    data = tasks.generate(spec())["train"]
    path = str(tmp_path / "d.jsonl")
    tasks.save_jsonl(path, data)
    back = tasks.load_jsonl(path, vocab_size=16, num_classes=2)
    assert back == data


def test_jsonl_label_out_of_range_names_line(tmp_path):
    path = str(tmp_path / "d.jsonl")
    with open(path, "w") as fh:
        fh.write('{"tokens": [2, 3], "label": 0}\n')
        fh.write('{"tokens": [2, 3], "label": 2}\n')
    with pytest.raises(DataError) as exc:
        tasks.load_jsonl(path, num_classes=2)
    assert "line 2" in str(exc.value)


def test_jsonl_malformed_line_names_line(tmp_path):
    path = str(tmp_path / "d.jsonl")
    with open(path, "w") as fh:
        fh.write('{"tokens": [2], "label": 0}\n')
        fh.write("{not json\n")
    with pytest.raises(DataError) as exc:
        tasks.load_jsonl(path)
    assert "line 2" in str(exc.value)


def test_jsonl_rejects_bad_tokens(tmp_path):
    path = str(tmp_path / "d.jsonl")
    with open(path, "w") as fh:
        fh.write('{"tokens": [], "label": 0}\n')
    with pytest.raises(DataError):
        tasks.load_jsonl(path)
    with open(path, "w") as fh:
        fh.write('{"tokens": [99], "label": 0}\n')
    with pytest.raises(DataError):
        tasks.load_jsonl(path, vocab_size=16)


def test_jsonl_empty_file_gives_empty_dataset(tmp_path):
    path = str(tmp_path / "d.jsonl")
    open(path, "w").close()
    assert tasks.load_jsonl(path) == ()


# --- few-shot and accuracy -------------------------------------------------------


def test_fewshot_reproducible_and_distinct():
    data = tasks.generate(spec())["train"]
    a = tasks.fewshot_subsample(data, 32, seed=42)
    b = tasks.fewshot_subsample(data, 32, seed=42)
    assert a == b
    assert len(set(a)) == 32
    c = tasks.fewshot_subsample(data, 32, seed=43)
    assert a != c


def test_fewshot_full_size_is_permutation():
    data = tasks.generate(spec())["train"]
    out = tasks.fewshot_subsample(data, len(data), seed=1)
    assert sorted(out, key=lambda e: (e.tokens, e.label)) == \
        sorted(data, key=lambda e: (e.tokens, e.label))


def test_fewshot_idempotent_on_result_set():
    data = tasks.generate(spec())["train"]
    once = tasks.fewshot_subsample(data, 16, seed=5)
    twice = tasks.fewshot_subsample(once, 16, seed=5)
    assert set(once) == set(twice)


def test_fewshot_bounds():
    data = tasks.generate(spec())["train"]
    with pytest.raises(DataError):
        tasks.fewshot_subsample(data, 0, seed=1)
    with pytest.raises(DataError):
        tasks.fewshot_subsample(data, len(data) + 1, seed=1)


@given(st.lists(st.integers(0, 3), min_size=1, max_size=50))
@settings(max_examples=50, deadline=None)
def test_accuracy_properties(labels):
    assert tasks.accuracy(labels, labels) == 1.0
    wrong = [l + 1 for l in labels]
    assert tasks.accuracy(wrong, labels) == 0.0


def test_accuracy_fraction_and_mismatch():
    assert tasks.accuracy([1, 0, 1, 1], [1, 0, 0, 1]) == 0.75
    with pytest.raises(DataError):
        tasks.accuracy([1], [1, 0])
    with pytest.raises(DataError):
        tasks.accuracy([], [])
