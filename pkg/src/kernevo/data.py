"""Word embeddings, averaged sentence embeddings, annotated datasets and folds."""

from __future__ import annotations

import csv
import logging
import string
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, TextIO, Union

import numpy as np

log = logging.getLogger(__name__)

EMOTIONS = ("anger", "disgust", "fear", "joy", "sadness", "surprise")
DATASET_COLUMNS = ("id", "text") + EMOTIONS

PathOrStream = Union[str, Path, TextIO, Iterable[str]]


class FormatError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass
class EmbeddingTable:
    dim: int
    vectors: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.vectors)

    def __contains__(self, word: str) -> bool:
        return word in self.vectors

    def get(self, word: str) -> Optional[np.ndarray]:
        return self.vectors.get(word)


@dataclass
class Dataset:
    X: np.ndarray
    f: np.ndarray
    names: Optional[list[str]] = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.f = np.asarray(self.f, dtype=float).ravel()
        if self.X.shape[0] != self.f.shape[0]:
            raise ValueError(f"{self.X.shape[0]} rows but {self.f.shape[0]} targets")
        if self.X.shape[0] < 1:
            raise ValueError("empty dataset")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.f))):
            raise ValueError("dataset contains non-finite values")

    def __len__(self) -> int:
        return self.f.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, mask) -> "Dataset":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        names = [self.names[i] for i in idx] if self.names is not None else None
        return Dataset(self.X[idx], self.f[idx], names)

    def centered(self) -> tuple["Dataset", float]:
        offset = float(self.f.mean())
        return Dataset(self.X, self.f - offset, self.names), offset


@dataclass
class FoldAssignment:
    k: int
    assignment: np.ndarray

    def sizes(self) -> list[int]:
        return np.bincount(self.assignment, minlength=self.k).tolist()

    def split(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """Boolean ``(train, test)`` masks for one fold."""
        test = self.assignment == fold
        return ~test, test


def _lines(source: PathOrStream) -> Iterable[str]:
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            yield from fh
    else:
        yield from source


def load_embeddings(source: PathOrStream) -> EmbeddingTable:
    """Read GloVe-style text: a token followed by ``d`` decimals per line."""
    table: Optional[EmbeddingTable] = None
    for lineno, line in enumerate(_lines(source), start=1):
        parts = line.rstrip("\n").split(" ")
        parts = [p for p in parts if p != ""]
        if not parts:
            continue
        word, values = parts[0], parts[1:]
        if table is None:
            if not values:
                raise FormatError("embedding line has no values", lineno)
            table = EmbeddingTable(len(values))
        if len(values) != table.dim:
            raise FormatError(f"expected {table.dim} values, found {len(values)}", lineno)
        try:
            vec = np.array([float(v) for v in values])
        except ValueError as exc:
            raise FormatError(f"unparseable number ({exc})", lineno) from None
        if word in table.vectors:
            log.warning("duplicate embedding for %r on line %d ignored", word, lineno)
            continue
        table.vectors[word] = vec
    if table is None:
        raise FormatError("embedding source is empty")
    return table


_PUNCT = set(string.punctuation)


def preprocess(text: str) -> list[str]:
    """Lowercase, delete punctuation characters and split on whitespace."""
    kept = "".join(
        ch for ch in text.lower()
        if ch not in _PUNCT and not unicodedata.category(ch).startswith("P")
    )
    return kept.split()


def sentence_embedding(
    tokens: list[str], table: EmbeddingTable, drop_missing: bool = False
) -> np.ndarray:
    """Average of the token vectors.

    By default unknown tokens contribute a zero vector and still count in the
    divisor; ``drop_missing=True`` removes them before averaging instead.
    Either way an empty result is the zero vector.
    """
    vecs = [table.get(t) for t in tokens]
    if drop_missing:
        vecs = [v for v in vecs if v is not None]
    if not vecs:
        return np.zeros(table.dim)
    total = np.zeros(table.dim)
    for v in vecs:
        if v is not None:
            total += v
    return total / len(vecs)


def load_dataset(
    source: PathOrStream,
    table: EmbeddingTable,
    emotion: str = "anger",
    delimiter: Optional[str] = None,
    drop_missing: bool = False,
) -> Dataset:
    """Load a delimited ``id, text, <six emotion scores>`` file with a header row.

    Scores are kept on their native scale.  The delimiter defaults to tab for
    ``.tsv`` paths and comma otherwise.
    """
    if delimiter is None:
        delimiter = "\t" if isinstance(source, (str, Path)) and str(source).endswith(".tsv") else ","
    reader = csv.reader(_lines(source), delimiter=delimiter)
    try:
        header = [h.strip().lower() for h in next(reader)]
    except StopIteration:
        raise FormatError("dataset is empty", 1) from None
    for col in ("id", "text", emotion):
        if col not in header:
            raise FormatError(f"missing column {col!r}", 1)
    i_id, i_text, i_score = header.index("id"), header.index("text"), header.index(emotion)
    rows, targets, names = [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise FormatError(f"expected {len(header)} fields, found {len(row)}", lineno)
        try:
            score = float(row[i_score])
        except ValueError:
            raise FormatError(f"score {row[i_score]!r} is not a number", lineno) from None
        if not np.isfinite(score):
            raise FormatError(f"score {row[i_score]!r} is not finite", lineno)
        rows.append(sentence_embedding(preprocess(row[i_text]), table, drop_missing))
        targets.append(score)
        names.append(row[i_id])
    if not rows:
        raise FormatError("dataset has no records")
    return Dataset(np.vstack(rows), np.array(targets), names)


def load_matrix_dataset(path: Union[str, Path]) -> Dataset:
    """Load pre-embedded data from an ``.npz`` holding arrays ``X`` and ``f``."""
    with np.load(path) as npz:
        if "X" not in npz or "f" not in npz:
            raise FormatError(f"{path}: npz needs arrays 'X' and 'f'")
        names = [str(n) for n in npz["names"]] if "names" in npz else None
        return Dataset(npz["X"], npz["f"], names)


def load_semeval(xml_path: Union[str, Path], gold_path: Union[str, Path]) -> list[tuple]:
    """Convert an Affective Text ``.xml`` + ``.emotions.gold`` pair to dataset rows.

    Returns ``(id, text, anger, ..., surprise)`` tuples ready for
    :func:`write_dataset`.
    """
    import xml.etree.ElementTree as ET

    root = ET.parse(xml_path).getroot()
    texts = {inst.get("id"): (inst.text or "").strip() for inst in root.iter("instance")}
    rows = []
    for lineno, line in enumerate(_lines(gold_path), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 1 + len(EMOTIONS):
            raise FormatError(f"expected {1 + len(EMOTIONS)} fields", lineno)
        if parts[0] not in texts:
            raise FormatError(f"no headline with id {parts[0]}", lineno)
        rows.append((parts[0], texts[parts[0]], *(float(p) for p in parts[1:])))
    return rows


def write_dataset(rows, path: Union[str, Path], delimiter: str = ",") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(DATASET_COLUMNS)
        writer.writerows(rows)


def make_folds(n: int, k: int, seed: int = 0) -> FoldAssignment:
    """Seeded shuffle of ``range(n)`` cut into ``k`` near-equal blocks."""
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=int)
    for fold, block in enumerate(np.array_split(perm, k)):
        assignment[block] = fold
    return FoldAssignment(k, assignment)


def save_folds(folds: FoldAssignment, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("index", "fold"))
        writer.writerows(enumerate(folds.assignment.tolist()))


def load_folds(path: Union[str, Path]) -> FoldAssignment:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        pairs = [(int(i), int(k)) for i, k in reader]
    assignment = np.empty(len(pairs), dtype=int)
    seen = set()
    for i, k in pairs:
        if i in seen or not 0 <= i < len(pairs):
            raise FormatError(f"fold file {path}: bad or repeated index {i}")
        seen.add(i)
        assignment[i] = k
    return FoldAssignment(int(assignment.max()) + 1, assignment)
