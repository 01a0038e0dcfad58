"""Dataset directories: `.pcs` files, ``manifest.csv`` and ``classes.txt``."""
from __future__ import annotations

import csv
import io
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

from .geometry import GestureSequence, PcsFormatError, read_sequence, write_sequence_file

MANIFEST = "manifest.csv"
CLASSES = "classes.txt"
MANIFEST_COLUMNS = ["path", "label", "subject", "split"]


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    sequences: list[GestureSequence]
    splits: list[str]
    class_names: list[str]
    paths: list[str]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, split: str) -> list[GestureSequence]:
        return [s for s, tag in zip(self.sequences, self.splits) if tag == split]


def write_dataset(out_dir, sequences, splits, class_names) -> list[str]:
    """Write atomically: everything goes to a temp dir that is renamed into place."""
    out_dir = Path(out_dir)
    if len(sequences) != len(splits):
        raise ValueError("one split tag per sequence required")
    parent = out_dir.parent if str(out_dir.parent) else Path(".")
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=parent))
    try:
        paths = []
        width = max(3, len(str(len(sequences))))
        for n, seq in enumerate(sequences):
            rel = f"seq_{n:0{width}d}.pcs"
            (tmp / rel).write_bytes(write_sequence_file(seq))
            paths.append(rel)
        (tmp / CLASSES).write_text("".join(f"{c}\n" for c in class_names), encoding="utf-8")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for rel, seq, tag in zip(paths, sequences, splits):
            w.writerow([rel, seq.label, seq.subject_id, tag])
        (tmp / MANIFEST).write_text(buf.getvalue(), encoding="utf-8")
        if out_dir.exists():
            if any(out_dir.iterdir()):
                raise FileExistsError(f"output directory {out_dir} exists and is not empty")
            out_dir.rmdir()
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return paths


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise DatasetError(f"missing manifest: {manifest}")
    classes_file = root / CLASSES
    if not classes_file.is_file():
        raise DatasetError(f"missing class list: {classes_file}")
    class_names = [ln for ln in classes_file.read_text(encoding="utf-8").splitlines() if ln]
    sequences, splits, paths = [], [], []
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_COLUMNS:
            raise DatasetError(f"{manifest}: header must be {','.join(MANIFEST_COLUMNS)}")
        for row in reader:
            try:
                seq = read_sequence(root / row["path"])
            except (OSError, PcsFormatError) as exc:
                raise DatasetError(f"{root / row['path']}: {exc}") from None
            if str(seq.label) != row["label"] or seq.subject_id != row["subject"]:
                raise DatasetError(f"{row['path']}: label/subject disagree with manifest")
            if seq.label >= len(class_names):
                raise DatasetError(f"{row['path']}: label {seq.label} >= class count {len(class_names)}")
            sequences.append(seq)
            splits.append(row["split"])
            paths.append(row["path"])
    return Dataset(sequences, splits, class_names, paths)
