import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from cxrvgg.data import ClassLabel, Dataset, Item, _stratify, fold_split, load_dataset, stratified_kfold
from cxrvgg.errors import DatasetError, DomainError, InputError


def _png(path):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(path)


@pytest.fixture
def tiny_root(tmp_path):
    for name in ("covid19", "no_finding", "other_pneumonia"):
        for i in range(2):
            _png(tmp_path / name / f"{i}.png")
    return tmp_path


class TestLoad:
    def test_directory_layout(self, tiny_root):
        ds = load_dataset(tiny_root)
        assert len(ds) == 6
        assert list(ds.class_counts.values()) == [2, 2, 2]

    def test_subdiagnosis_directories(self, tiny_root):
        _png(tiny_root / "other_pneumonia" / "sars" / "a.png")
        ds = load_dataset(tiny_root)
        sars = [it for it in ds if it.subdiagnosis == "SARS"]
        assert len(sars) == 1 and sars[0].label is ClassLabel.OTHER_PNEUMONIA

    def test_manifest_sars_is_other_pneumonia(self, tmp_path):
        for rel in ("covid/a.png", "normal/b.png", "sars/c.png"):
            _png(tmp_path / rel)
        (tmp_path / "manifest.csv").write_text(
            "path,label,subdiagnosis\ncovid/a.png,covid19,\nnormal/b.png,no_finding,\nsars/c.png,,\n")
        ds = load_dataset(tmp_path)
        item = [it for it in ds if it.path.name == "c.png"][0]
        assert item.label is ClassLabel.OTHER_PNEUMONIA
        assert item.subdiagnosis == "SARS"

    def test_missing_class_named(self, tiny_root):
        for p in (tiny_root / "no_finding").iterdir():
            p.unlink()
        (tiny_root / "no_finding").rmdir()
        with pytest.raises(DatasetError, match="No Finding"):
            load_dataset(tiny_root)

    def test_empty_class(self, tiny_root):
        for p in (tiny_root / "covid19").iterdir():
            p.unlink()
        with pytest.raises(DatasetError, match="COVID-19"):
            load_dataset(tiny_root)

    def test_unreadable_file_names_path(self, tiny_root):
        (tiny_root / "covid19" / "bad.png").write_bytes(b"nope")
        with pytest.raises(InputError, match="bad.png"):
            load_dataset(tiny_root)

    def test_duplicates_rejected(self, tmp_path):
        item = Item(tmp_path / "a.png", ClassLabel.COVID19)
        with pytest.raises(DatasetError):
            Dataset([item, item])


def _labels(sizes):
    return np.concatenate([np.full(n, c) for c, n in enumerate(sizes)])


class TestFolds:
    def test_single_class_even_split(self):
        plan = _stratify(np.zeros(10, int), 5, 0)
        assert np.bincount(plan.assignments).tolist() == [2] * 5

    def test_paper_class_sizes(self):
        labels = _labels([152, 125, 48])
        counts = _stratify(labels, 5, 0).counts(labels)
        assert set(counts[:, 0]) <= {30, 31}
        assert set(counts[:, 1]) == {25}
        assert set(counts[:, 2]) <= {9, 10}
        assert counts.sum(axis=0).tolist() == [152, 125, 48]

    def test_too_few_items_names_class(self):
        with pytest.raises(DomainError, match="Other Pneumonia"):
            _stratify(_labels([10, 10, 3]), 5, 0)

    def test_split_sizes(self):
        labels = _labels([34, 33, 33])
        ds = Dataset([Item(f"/x/{i}.png", ClassLabel(int(c))) for i, c in enumerate(labels)])
        plan = stratified_kfold(ds, 5, seed=1)
        train, test = fold_split(ds, plan, 0)
        assert (len(train), len(test)) == (80, 20)
        for c in ClassLabel:
            n_train, n_test = train.class_counts[c], test.class_counts[c]
            assert abs(n_train - 4 * n_test) <= 4  # 4:1 within one item per fold
        with pytest.raises(IndexError):
            fold_split(ds, plan, 5)

    def test_deterministic(self):
        labels = _labels([20, 15, 7])
        assert _stratify(labels, 5, 3) == _stratify(labels, 5, 3)
        assert _stratify(labels, 5, 3) != _stratify(labels, 5, 4)

    @given(st.lists(st.integers(5, 40), min_size=1, max_size=3), st.integers(2, 5), st.integers(0, 10**6))
    @settings(max_examples=60, deadline=None)
    def test_partition_and_balance(self, sizes, k, seed):
        labels = _labels(sizes)
        plan = _stratify(labels, k, seed)
        tests = [set(plan.test_indices(i).tolist()) for i in range(k)]
        assert set().union(*tests) == set(range(len(labels)))
        assert sum(len(t) for t in tests) == len(labels)
        for i in range(k):
            assert tests[i].isdisjoint(plan.train_indices(i).tolist())
        counts = plan.counts(labels)[:, : len(sizes)]
        assert np.all(counts.max(axis=0) - counts.min(axis=0) <= 1)
        totals = np.bincount(plan.assignments, minlength=k)
        assert totals.max() - totals.min() <= 1
