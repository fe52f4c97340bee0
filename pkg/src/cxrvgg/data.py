"""Three-class chest X-ray datasets and stratified k-fold splitting.

Directory layout::

    root/covid19/*.png
    root/no_finding/*.png
    root/other_pneumonia/*.png                 # and/or
    root/other_pneumonia/<subdiagnosis>/*.png

or a CSV manifest (``manifest.csv`` in ``root``, or ``root`` itself a
``.csv`` file) with header ``path,label,subdiagnosis``. Paths are relative
to the manifest's directory. ``label`` may be a class name or a known
sub-diagnosis (which implies Other Pneumonia); when empty it is taken from
the first path component, so ``sars/x.png`` is Other Pneumonia / sars.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .augment import IMAGE_SIZE, load_image
from .errors import DatasetError, DomainError, InputError
from .tensor import DTYPE, Rng

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class ClassLabel(enum.IntEnum):
    COVID19 = 0
    NO_FINDING = 1
    OTHER_PNEUMONIA = 2

    @property
    def dirname(self) -> str:
        return _DIRNAMES[self]

    @property
    def display(self) -> str:
        return _DISPLAY[self]

    @classmethod
    def parse(cls, text: str) -> "ClassLabel":
        key = _norm(text)
        if key in _ALIASES:
            return _ALIASES[key]
        raise DatasetError(f"unknown class label {text!r}")


_DIRNAMES = {ClassLabel.COVID19: "covid19", ClassLabel.NO_FINDING: "no_finding",
             ClassLabel.OTHER_PNEUMONIA: "other_pneumonia"}
_DISPLAY = {ClassLabel.COVID19: "COVID-19", ClassLabel.NO_FINDING: "No Finding",
            ClassLabel.OTHER_PNEUMONIA: "Other Pneumonia"}
CLASS_NAMES = tuple(_DISPLAY[c] for c in ClassLabel)

# sub-diagnoses grouped under Other Pneumonia
SUBDIAGNOSES = {
    "sars": "SARS",
    "streptococcus": "Streptococcus",
    "klebsiella": "Klebsiella",
    "legionellosis": "Legionellosis",
    "legionella": "Legionellosis",
    "pneumocystis": "Pneumocystis",
    "pcp": "Pneumocystis",
    "ards": "ARDS",
    "chlamydia": "Chlamydia",
    "chlamydophila": "Chlamydia",
}


def _norm(text: str) -> str:
    return "".join(ch for ch in text.lower() if ch.isalnum())


_ALIASES = {}
for _c in ClassLabel:
    for _alias in (_c.name, _c.dirname, _c.display):
        _ALIASES[_norm(_alias)] = _c
_ALIASES[_norm("normal")] = ClassLabel.NO_FINDING
_ALIASES[_norm("covid")] = ClassLabel.COVID19


@dataclass(frozen=True)
class Item:
    path: Path
    label: ClassLabel
    subdiagnosis: Optional[str] = None


class Dataset:
    """An ordered, immutable collection of labelled image paths."""

    def __init__(self, items: Sequence[Item], root: Optional[Path] = None):
        self.items: Tuple[Item, ...] = tuple(items)
        self.root = root
        paths = [str(it.path) for it in self.items]
        if len(set(paths)) != len(paths):
            seen, dupes = set(), []
            for p in paths:
                if p in seen:
                    dupes.append(p)
                seen.add(p)
            raise DatasetError(f"duplicate image paths: {', '.join(dupes[:5])}")

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i) -> Item:
        return self.items[i]

    def __iter__(self):
        return iter(self.items)

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(it.label) for it in self.items], dtype=int)

    @property
    def paths(self) -> List[str]:
        return [str(it.path) for it in self.items]

    @property
    def class_counts(self) -> Dict[ClassLabel, int]:
        counts = {c: 0 for c in ClassLabel}
        for it in self.items:
            counts[it.label] += 1
        return counts

    def subset(self, indices) -> "Dataset":
        return Dataset([self.items[int(i)] for i in indices], self.root)

    def one_hot(self) -> np.ndarray:
        out = np.zeros((len(self), len(ClassLabel)), dtype=DTYPE)
        out[np.arange(len(self)), self.labels] = 1.0
        return out

    def load_images(self, size: int = IMAGE_SIZE) -> np.ndarray:
        """Decode and resize every image into one ``[N, size, size, 3]`` array."""
        out = np.empty((len(self), size, size, 3), dtype=DTYPE)
        for i, it in enumerate(self.items):
            out[i] = load_image(it.path, size)
        return out


def _check_readable(path: Path) -> None:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.size  # header only
    except FileNotFoundError:
        raise InputError(path, "file does not exist") from None
    except (OSError, UnidentifiedImageError) as exc:
        raise InputError(path, f"unreadable image ({exc})") from None


def _images_in(directory: Path) -> List[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(root) -> Dataset:
    """Enumerate a dataset directory or manifest; images are decoded later, on demand."""
    root = Path(root)
    if root.is_file() and root.suffix.lower() == ".csv":
        return _load_manifest(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    if (root / "manifest.csv").is_file():
        return _load_manifest(root / "manifest.csv")
    items: List[Item] = []
    for label in ClassLabel:
        cdir = root / label.dirname
        if not cdir.is_dir():
            raise DatasetError(f"missing class directory for {label.display}: {cdir}")
        found = [Item(p, label) for p in _images_in(cdir)]
        if label is ClassLabel.OTHER_PNEUMONIA:
            for sub in sorted(d for d in cdir.iterdir() if d.is_dir()):
                sub_name = SUBDIAGNOSES.get(_norm(sub.name), sub.name)
                found += [Item(p, label, sub_name) for p in _images_in(sub)]
        if not found:
            raise DatasetError(f"class {label.display} has no images in {cdir}")
        items += found
    for it in items:
        _check_readable(it.path)
    return Dataset(items, root)


def _resolve_label(label_text: str, rel_path: str) -> Tuple[ClassLabel, Optional[str]]:
    text = label_text.strip()
    if not text:
        parts = Path(rel_path).parts
        if len(parts) < 2:
            raise DatasetError(f"manifest row {rel_path!r} has no label and no class directory")
        text = parts[0]
        if _norm(text) == _norm(ClassLabel.OTHER_PNEUMONIA.dirname) and len(parts) > 2:
            sub = SUBDIAGNOSES.get(_norm(parts[1]), parts[1])
            return ClassLabel.OTHER_PNEUMONIA, sub
    if _norm(text) in SUBDIAGNOSES:
        return ClassLabel.OTHER_PNEUMONIA, SUBDIAGNOSES[_norm(text)]
    return ClassLabel.parse(text), None


def _load_manifest(path: Path) -> Dataset:
    base = path.parent
    items = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or "path" not in reader.fieldnames:
            raise DatasetError(f"{path}: manifest needs a 'path' column")
        for row in reader:
            rel = (row.get("path") or "").strip()
            if not rel:
                continue
            label, sub = _resolve_label(row.get("label") or "", rel)
            given_sub = (row.get("subdiagnosis") or "").strip()
            if given_sub:
                sub = SUBDIAGNOSES.get(_norm(given_sub), given_sub)
            items.append(Item((base / rel), label, sub))
    ds = Dataset(items, base)
    for label, count in ds.class_counts.items():
        if count == 0:
            raise DatasetError(f"class {label.display} has no images in manifest {path}")
    for it in ds.items:
        _check_readable(it.path)
    return ds


# --------------------------------------------------------------------------
# folds

@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: Tuple[int, ...]

    def test_indices(self, i: int) -> np.ndarray:
        self._check(i)
        return np.flatnonzero(np.asarray(self.assignments) == i)

    def train_indices(self, i: int) -> np.ndarray:
        self._check(i)
        return np.flatnonzero(np.asarray(self.assignments) != i)

    def counts(self, labels) -> np.ndarray:
        """``[k, n_classes]`` table of per-fold class counts."""
        labels = np.asarray(labels, dtype=int)
        table = np.zeros((self.k, len(ClassLabel)), dtype=int)
        np.add.at(table, (np.asarray(self.assignments), labels), 1)
        return table

    def _check(self, i):
        if not 0 <= i < self.k:
            raise IndexError(f"fold index {i} out of range for k={self.k}")


def stratified_kfold(ds: Dataset, k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle each class with a seeded stream and deal its items round-robin over the folds.

    The dealing position carries over from one class to the next so fold
    sizes stay balanced overall as well as per class.
    """
    return _stratify(ds.labels, k, seed)


def _stratify(labels, k: int, seed: int) -> FoldPlan:
    labels = np.asarray(labels, dtype=int)
    if k < 2:
        raise DomainError(f"need k >= 2 folds, got {k}")
    rng = Rng(seed, "kfold")
    assignments = np.full(len(labels), -1, dtype=int)
    offset = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < k:
            name = ClassLabel(c).display if c in ClassLabel._value2member_map_ else str(c)
            raise DomainError(f"class {name} has {len(idx)} items, fewer than k={k}")
        idx = idx[rng.child(int(c)).permutation(len(idx))]
        assignments[idx] = (offset + np.arange(len(idx))) % k
        offset = (offset + len(idx)) % k
    return FoldPlan(k, tuple(int(a) for a in assignments))


def fold_split(ds: Dataset, plan: FoldPlan, i: int) -> Tuple[Dataset, Dataset]:
    """``(train, test)`` where test is fold ``i`` and train the remaining folds."""
    if len(plan.assignments) != len(ds):
        raise DatasetError("fold plan does not match the dataset")
    return ds.subset(plan.train_indices(i)), ds.subset(plan.test_indices(i))
