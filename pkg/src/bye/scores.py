from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ScoreMatrix:
    """Scores between new instances (rows) and reference instances (columns)."""

    values: np.ndarray
    row_ids: list
    col_ids: list
    empty_rows: list = field(default_factory=list)  # row ids without evidence

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.row_ids = [int(i) for i in self.row_ids]
        self.col_ids = [int(i) for i in self.col_ids]
        if self.values.shape != (len(self.row_ids), len(self.col_ids)):
            raise ValueError(f"score values {self.values.shape} vs {len(self.row_ids)} rows x {len(self.col_ids)} cols")
        if len(set(self.row_ids)) != len(self.row_ids) or len(set(self.col_ids)) != len(self.col_ids):
            raise ValueError("row/column ids must be unique")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("score matrix has non-finite entries")

    @property
    def shape(self):
        return self.values.shape

    def reorder(self, row_ids, col_ids):
        if set(row_ids) != set(self.row_ids) or set(col_ids) != set(self.col_ids):
            raise ValueError("reorder: id sets differ")
        ri = [self.row_ids.index(i) for i in row_ids]
        ci = [self.col_ids.index(i) for i in col_ids]
        return ScoreMatrix(self.values[np.ix_(ri, ci)], list(row_ids), list(col_ids), list(self.empty_rows))

    def row(self, row_id):
        return self.values[self.row_ids.index(row_id)]
