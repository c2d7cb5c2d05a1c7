"""Sample batches and their CSV + sidecar-JSON persistence."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import PointOutsideSet

PRIMAL = "primal"
DUAL = "dual"


@dataclass(frozen=True)
class SampleBatch:
    """An (n, d) matrix of points tagged with the space they live in.

    Primal batches carry their constraint and are validated row-by-row on
    construction; dual batches live in unconstrained R^d.
    """

    data: np.ndarray
    space: str
    constraint: geometry.ConstraintSet | None = None

    def __post_init__(self):
        data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        data = np.array(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.space not in (PRIMAL, DUAL):
            raise ValueError(f"space must be '{PRIMAL}' or '{DUAL}', got {self.space!r}")
        if self.space == PRIMAL and self.constraint is not None and len(data) > 0:
            ok = geometry.contains_mask(self.constraint, data)
            if not np.all(ok):
                bad = int(np.sum(~ok))
                raise PointOutsideSet(f"{bad} primal rows violate the constraint")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def save_batch(batch: SampleBatch, stem: str, extra: dict | None = None) -> str:
    """Write ``<stem>.csv`` plus a ``<stem>.json`` sidecar (and token blob if needed)."""
    d = batch.dim
    header = ",".join(f"x{i}" for i in range(d))
    csv_path = stem + ".csv"
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        if batch.n:
            np.savetxt(fh, batch.data, fmt="%.17g", delimiter=",")

    tokens_file = None
    if isinstance(batch.constraint, geometry.PolytopeConstraint):
        tokens_file = os.path.basename(stem) + geometry.TOKEN_BLOB_SUFFIX
        geometry.write_token_blob(stem + geometry.TOKEN_BLOB_SUFFIX, batch.constraint.tokens)
    doc = {
        "space": batch.space,
        "n": batch.n,
        "d": d,
        "constraint": (None if batch.constraint is None
                       else geometry.constraint_to_dict(batch.constraint, tokens_file)),
    }
    if extra:
        doc.update(extra)
    with open(stem + ".json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path


def load_csv_matrix(csv_path: str) -> np.ndarray:
    """Read a headered sample CSV into an (n, d) float64 array."""
    with open(csv_path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        d = len(header.split(",")) if header else 0
        rows = np.loadtxt(fh, delimiter=",", ndmin=2, dtype=np.float64)
    if rows.size == 0:
        rows = np.empty((0, d))
    return rows


def load_batch(stem: str) -> SampleBatch:
    """Load a batch written by save_batch from its path stem."""
    data = load_csv_matrix(stem + ".csv")
    with open(stem + ".json", encoding="utf-8") as fh:
        doc = json.load(fh)
    constraint = None
    if doc.get("constraint") is not None:
        constraint = geometry.constraint_from_dict(doc["constraint"],
                                                   base_dir=os.path.dirname(stem) or ".")
    return SampleBatch(data=data, space=doc["space"], constraint=constraint)
