"""Dataset container and the on-disk record formats.

Marks, images, GTs, targets and bags are JSON lines, one object per line.
Candidates are a CSV table whose header must name the millimeter location
columns explicitly. Floats are written with ``repr`` so every file
round-trips exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

from softmil.errors import ValidationError
from softmil.evaluation import Candidate, with_intercept
from softmil.geometry import EllipseMark, GroundTruthMark
from softmil.labels import SoftTarget
from softmil.objective import Bag, ModelWeights

MARKS_FILE = "marks.jsonl"
IMAGES_FILE = "images.jsonl"
CANDIDATES_FILE = "candidates.csv"

MARK_FIELDS = ("mark_id", "image_id", "reader_id", "cx_mm", "cy_mm", "r1_mm", "r2_mm", "theta_rad")
CANDIDATE_PREFIX = ("image_id", "candidate_id", "x_mm", "y_mm")
MODEL_FORMAT = "softmil-model"
MODEL_VERSION = 1


@dataclass(eq=False)
class Dataset:
    images: dict[int, tuple[int, ...]]
    marks: list[EllipseMark]
    candidates: list[Candidate]
    feature_names: list[str]

    @property
    def readers_per_image(self) -> dict[int, int]:
        return {i: len(r) for i, r in self.images.items()}

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def subset(self, image_ids: Iterable[int]) -> Dataset:
        keep = set(image_ids)
        return Dataset(
            {i: r for i, r in self.images.items() if i in keep},
            [m for m in self.marks if m.image_id in keep],
            [c for c in self.candidates if c.image_id in keep],
            list(self.feature_names),
        )


def _fail(path, line, msg) -> ValidationError:
    return ValidationError(f"{path}:{line}: {msg}")


def _read_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise _fail(path, lineno, f"malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise _fail(path, lineno, "expected a JSON object")
            yield lineno, obj


def _write_jsonl(path: Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def _field(obj: dict, name: str, kind, path, lineno):
    if name not in obj:
        raise _fail(path, lineno, f"missing field '{name}'")
    value = obj[name]
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise _fail(path, lineno, f"field '{name}' must be an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise _fail(path, lineno, f"field '{name}' must be a finite number, got {value!r}")
        return float(value)
    return value


def mark_record(m: EllipseMark) -> dict:
    return {
        "mark_id": m.mark_id, "image_id": m.image_id, "reader_id": m.reader_id,
        "cx_mm": m.center[0], "cy_mm": m.center[1],
        "r1_mm": m.semi_axes[0], "r2_mm": m.semi_axes[1], "theta_rad": m.rotation,
    }


def mark_from_record(obj: dict, path="<record>", lineno=0) -> EllipseMark:
    for key in ("cx", "cy", "r1", "r2", "x", "y"):
        if key in obj:
            raise _fail(path, lineno, f"field '{key}' lacks units; use '{key}_mm'")
    vals = {}
    for name in MARK_FIELDS:
        vals[name] = _field(obj, name, int if name.endswith("_id") else float, path, lineno)
    try:
        return EllipseMark(
            vals["mark_id"], vals["image_id"], vals["reader_id"],
            (vals["cx_mm"], vals["cy_mm"]), (vals["r1_mm"], vals["r2_mm"]), vals["theta_rad"],
        )
    except ValidationError as exc:
        raise _fail(path, lineno, str(exc)) from None


def read_images(path) -> dict[int, tuple[int, ...]]:
    path = Path(path)
    images: dict[int, tuple[int, ...]] = {}
    for lineno, obj in _read_jsonl(path):
        image_id = _field(obj, "image_id", int, path, lineno)
        readers = _field(obj, "reader_ids", list, path, lineno)
        if not isinstance(readers, list) or not readers:
            raise _fail(path, lineno, "field 'reader_ids' must be a nonempty list")
        if any(isinstance(r, bool) or not isinstance(r, int) for r in readers):
            raise _fail(path, lineno, "field 'reader_ids' must hold integers")
        if len(set(readers)) != len(readers):
            raise _fail(path, lineno, f"duplicate reader in roster of image {image_id}")
        if image_id in images:
            raise _fail(path, lineno, f"duplicate image_id {image_id}")
        images[image_id] = tuple(readers)
    return images


def read_marks(path, images: dict[int, tuple[int, ...]] | None = None) -> list[EllipseMark]:
    path = Path(path)
    marks, seen = [], set()
    for lineno, obj in _read_jsonl(path):
        m = mark_from_record(obj, path, lineno)
        if m.mark_id in seen:
            raise _fail(path, lineno, f"duplicate mark_id {m.mark_id}")
        seen.add(m.mark_id)
        if images is not None:
            if m.image_id not in images:
                raise _fail(path, lineno, f"mark {m.mark_id} on image {m.image_id} without a reader roster")
            if m.reader_id not in images[m.image_id]:
                raise _fail(path, lineno, f"reader {m.reader_id} is not on the roster of image {m.image_id}")
        marks.append(m)
    return marks


def read_candidates(path, images: dict | None = None) -> tuple[list[Candidate], list[str]]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise _fail(path, 1, "missing header row") from None
        if tuple(header[:4]) != CANDIDATE_PREFIX:
            raise _fail(path, 1, f"header must start with {','.join(CANDIDATE_PREFIX)} (locations in mm)")
        names = header[4:]
        if len(set(names)) != len(names):
            raise _fail(path, 1, "duplicate feature names")
        out, seen = [], set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise _fail(path, lineno, f"expected {len(header)} columns, got {len(row)}")
            try:
                image_id, cand_id = int(row[0]), int(row[1])
            except ValueError:
                raise _fail(path, lineno, "image_id/candidate_id must be integers") from None
            try:
                values = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise _fail(path, lineno, f"non-numeric value ({exc})") from None
            if not all(math.isfinite(v) for v in values):
                raise _fail(path, lineno, "non-finite value")
            if cand_id in seen:
                raise _fail(path, lineno, f"duplicate candidate_id {cand_id}")
            seen.add(cand_id)
            if images is not None and image_id not in images:
                raise _fail(path, lineno, f"candidate {cand_id} references unknown image {image_id}")
            out.append(Candidate(cand_id, image_id, (values[0], values[1]), np.array(values[2:])))
    return out, names


def ingest(directory=None, *, marks=None, images=None, candidates=None) -> Dataset:
    """Load and cross-validate a dataset from its three files."""
    if directory is not None:
        directory = Path(directory)
        marks = marks or directory / MARKS_FILE
        images = images or directory / IMAGES_FILE
        candidates = candidates or directory / CANDIDATES_FILE
    rosters = read_images(images)
    mark_list = read_marks(marks, rosters)
    cand_list, names = read_candidates(candidates, rosters)
    return Dataset(rosters, mark_list, cand_list, names)


def export(dataset: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_jsonl(directory / IMAGES_FILE,
                 ({"image_id": i, "reader_ids": list(r)} for i, r in dataset.images.items()))
    _write_jsonl(directory / MARKS_FILE, (mark_record(m) for m in dataset.marks))
    with open(directory / CANDIDATES_FILE, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(CANDIDATE_PREFIX) + list(dataset.feature_names))
        for c in dataset.candidates:
            writer.writerow([c.image_id, c.candidate_id, repr(float(c.location[0])),
                             repr(float(c.location[1]))] + [repr(float(v)) for v in c.features])


def write_gts(path, gts: Sequence[GroundTruthMark]) -> None:
    _write_jsonl(Path(path), (
        {"gt_id": g.gt_id, "image_id": g.image_id, "referred_marks": list(g.referred_marks),
         "representative": mark_record(g.representative_ellipse), "score": g.score,
         "distinct_readers": g.distinct_readers}
        for g in gts
    ))


def read_gts(path) -> list[GroundTruthMark]:
    path = Path(path)
    out = []
    for lineno, obj in _read_jsonl(path):
        rep = mark_from_record(_field(obj, "representative", dict, path, lineno), path, lineno)
        referred = tuple(_field(obj, "referred_marks", list, path, lineno))
        score = _field(obj, "score", int, path, lineno)
        if score != len(referred):
            raise _fail(path, lineno, "score must equal the number of referred marks")
        out.append(GroundTruthMark(
            _field(obj, "gt_id", int, path, lineno), _field(obj, "image_id", int, path, lineno),
            referred, rep, score, _field(obj, "distinct_readers", int, path, lineno),
        ))
    return out


def write_targets(path, targets: Sequence[SoftTarget]) -> None:
    _write_jsonl(Path(path), (
        {"gt_id": t.gt_id, "image_id": t.image_id, "p_target": t.p_target, "n_annotators": t.n_annotators}
        for t in targets
    ))


def read_targets(path) -> list[SoftTarget]:
    path = Path(path)
    return [
        SoftTarget(_field(o, "gt_id", int, path, n), _field(o, "image_id", int, path, n),
                   _field(o, "p_target", float, path, n), _field(o, "n_annotators", int, path, n))
        for n, o in _read_jsonl(path)
    ]


def write_bags(path, bags: Sequence[Bag]) -> None:
    """Bag membership only; features stay in the candidates table."""
    _write_jsonl(Path(path), (
        {"bag_id": b.bag_id, "image_id": b.image_id, "kind": b.kind, "p_target": b.p_target,
         "annotator_weight": b.annotator_weight, "candidate_ids": list(b.candidate_ids)}
        for b in bags
    ))


def read_bags(path, candidates: Sequence[Candidate], intercept: bool = True) -> list[Bag]:
    path = Path(path)
    by_id = {c.candidate_id: c for c in candidates}
    bags = []
    for lineno, obj in _read_jsonl(path):
        ids = _field(obj, "candidate_ids", list, path, lineno)
        missing = [i for i in ids if i not in by_id]
        if missing or not ids:
            raise _fail(path, lineno, f"unknown or missing candidate ids {missing[:5]}")
        x = np.vstack([by_id[i].features for i in ids])
        try:
            bags.append(Bag(
                _field(obj, "bag_id", int, path, lineno), _field(obj, "image_id", int, path, lineno),
                with_intercept(x) if intercept else x, _field(obj, "p_target", float, path, lineno),
                _field(obj, "annotator_weight", float, path, lineno), _field(obj, "kind", str, path, lineno),
                tuple(ids),
            ))
        except ValidationError as exc:
            raise _fail(path, lineno, str(exc)) from None
    return bags


def model_document(
    weights: ModelWeights,
    feature_names: Sequence[str],
    lam: float,
    normalization: str,
    use_annotator_weights: bool,
    convergence: dict[str, Any],
) -> dict:
    """Model file contents; weights are keyed by feature name, zeros omitted."""
    if weights.dim != len(feature_names) + 1:
        raise ValidationError("model expects one weight per feature plus an intercept")
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "lambda": lam,
        "normalization": normalization,
        "use_annotator_weights": use_annotator_weights,
        "n_features": len(feature_names),
        "weights": {n: float(v) for n, v in zip(feature_names, weights.w[:-1]) if v != 0.0},
        "intercept": float(weights.w[-1]),
        "convergence": convergence,
    }


def write_model(path, document: dict) -> None:
    Path(path).write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_model(path, feature_names: Sequence[str]) -> tuple[ModelWeights, dict]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise _fail(path, exc.lineno, f"malformed JSON ({exc.msg})") from None
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
        raise ValidationError(f"{path}: not a version {MODEL_VERSION} {MODEL_FORMAT} file")
    index = {n: i for i, n in enumerate(feature_names)}
    w = np.zeros(len(feature_names) + 1)
    for name, value in doc["weights"].items():
        if name not in index:
            raise ValidationError(f"{path}: model feature '{name}' is not in the candidates table")
        w[index[name]] = float(value)
    w[-1] = float(doc["intercept"])
    return ModelWeights.zeros(len(w)).with_values(w), doc

