import itertools
import json
import re

import numpy as np
import pytest

from ehrtext.data import (
    PairedDataset,
    SplitPlan,
    SynthConfig,
    generate_synthetic,
    ingest,
    make_split_plan,
    reduce_fraction,
    write_dataset,
)
from ehrtext.exceptions import (
    ConfigError,
    DataError,
    DuplicateKeyError,
    EmptyJoinError,
    InsufficientDataError,
)
from ehrtext.tabular import build_schema
from ehrtext.text import preprocess_note


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SynthConfig(n_pairs=200, seed=3))


class TestGenerator:
    def test_deterministic(self, small):
        again = generate_synthetic(SynthConfig(n_pairs=200, seed=3))
        assert again == small
        np.testing.assert_array_equal(again.latent, small.latent)
        assert generate_synthetic(SynthConfig(n_pairs=200, seed=4)) != small

    def test_shapes_and_labels(self, small):
        assert len(small) == 200
        assert small.tasks == ["readmission", "critical"]
        for ys in small.labels.values():
            assert set(ys) <= {0, 1} and 0 < sum(ys) < 200

    def test_schema_roles(self, small):
        s = build_schema(small.rows)
        cats = {c.name for c in s.categorical}
        assert cats == {"cat_00", "cat_01", "cat_02", "cat_03"}
        assert len(s.numerical) == 32

    def test_notes_contain_noise_that_cleaning_removes(self, small):
        raw = small.notes[0]
        assert re.search(r"\d", raw) and "Admission Date:" in raw and "Technique:" in raw
        clean = preprocess_note(raw)
        assert not re.search(r"[\d\W_]", clean.replace(" ", ""))
        assert "protocol" not in clean and "signed" not in clean

    def test_latent_drives_labels(self):
        ds = generate_synthetic(SynthConfig(n_pairs=2000, seed=0, label_scale=4.0))
        y = np.array(ds.labels["readmission"])
        best = max(abs(np.corrcoef(ds.latent[:, j], y)[0, 1]) for j in range(ds.latent.shape[1]))
        assert best > 0.15

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            generate_synthetic(SynthConfig(n_pairs=0))
        with pytest.raises(ConfigError):
            generate_synthetic(SynthConfig(cardinalities=(1,)))
        with pytest.raises(ConfigError):
            generate_synthetic(SynthConfig(label_weights={"readmission": [1.0]}))


class TestIngest:
    def test_round_trip(self, small, tmp_path):
        csv_path, notes_path = write_dataset(small, tmp_path)
        back = ingest(csv_path, notes_path)
        assert back.ids == small.ids
        assert back.notes == small.notes
        assert back.labels == small.labels
        assert back.rows == small.rows

    def test_unmatched_dropped_and_counted(self, small, tmp_path):
        csv_path, notes_path = write_dataset(small.subset(range(10)), tmp_path)
        lines = notes_path.read_text().splitlines()
        lines = lines[:7] + [json.dumps({"id": "orphan", "text": "x"})]
        notes_path.write_text("\n".join(lines) + "\n")
        ds, report = ingest(csv_path, notes_path, return_report=True)
        assert len(ds) == 7
        assert (report.pairs, report.rows_without_notes, report.notes_without_rows) == (7, 3, 1)

    def test_duplicate_keys(self, tmp_path):
        (tmp_path / "t.csv").write_text("id,a\n1,2\n1,3\n")
        (tmp_path / "n.jsonl").write_text('{"id": "1", "text": "x"}\n')
        with pytest.raises(DuplicateKeyError):
            ingest(tmp_path / "t.csv", tmp_path / "n.jsonl")
        (tmp_path / "t.csv").write_text("id,a\n1,2\n")
        (tmp_path / "n.jsonl").write_text('{"id": "1", "text": "x"}\n{"id": "1", "text": "y"}\n')
        with pytest.raises(DuplicateKeyError):
            ingest(tmp_path / "t.csv", tmp_path / "n.jsonl")

    def test_empty_join_and_missing_key(self, tmp_path):
        (tmp_path / "t.csv").write_text("id,a\n1,2\n")
        (tmp_path / "n.jsonl").write_text('{"id": "9", "text": "x"}\n')
        with pytest.raises(EmptyJoinError):
            ingest(tmp_path / "t.csv", tmp_path / "n.jsonl")
        with pytest.raises(DataError):
            ingest(tmp_path / "t.csv", tmp_path / "n.jsonl", key="patient")

    def test_unique_ids_enforced(self):
        with pytest.raises(DataError):
            PairedDataset(["a", "a"], [{}, {}], ["", ""], {})


class TestSplits:
    def test_default_protocol_disjoint(self):
        plan = make_split_plan(5000, seed=0)
        assert len(plan.subsets) == 5
        parts = [set(plan.pretrain_pool)] + [set(s[k]) for s in plan.subsets for k in ("train", "val", "test")]
        for a, b in itertools.combinations(parts, 2):
            assert not a & b
        assert set().union(*parts) == set(range(5000))
        assert len(plan.pretrain_pool) == 5000 - 5 * 850
        for s in plan.subsets:
            assert (len(s["train"]), len(s["val"]), len(s["test"])) == (480, 120, 250)

    def test_insufficient(self):
        with pytest.raises(InsufficientDataError):
            make_split_plan(4250)

    def test_validate_catches_leak(self):
        plan = make_split_plan(100, n_subsets=2, trainval_size=20, test_size=10)
        plan.subsets[1]["test"].append(plan.pretrain_pool[0])
        with pytest.raises(DataError):
            plan.validate()

    def test_round_trip(self, tmp_path):
        plan = make_split_plan(300, n_subsets=2, trainval_size=50, test_size=20, seed=5)
        plan.save(tmp_path / "p.json")
        assert SplitPlan.load(tmp_path / "p.json") == plan

    def test_reduce_fraction(self):
        idx = list(range(100, 180))
        half = reduce_fraction(idx, 0.5, seed=1)
        assert len(half) == 40 and set(half) <= set(idx)
        assert half == reduce_fraction(idx, 0.5, seed=1)
        assert half != reduce_fraction(idx, 0.5, seed=2)
        assert reduce_fraction(idx, 1.0, seed=1) == idx
