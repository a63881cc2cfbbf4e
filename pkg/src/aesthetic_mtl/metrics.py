"""PCC / SCC / RMSE between ground-truth and predicted scalar scores."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import DIMENSIONS
from .errors import DegenerateInputError, InvalidInputError
from .score_dist import mean_score

MEASURES = ("pcc", "scc", "rmse")
MEASURE_TITLES = {"pcc": "PCC", "scc": "SCC", "rmse": "RMSE"}
DIMENSION_TITLES = {"fineness": "Fineness", "colorfulness": "Colorful", "harmony": "Harmony", "overall": "Overall"}


def _pair(a, b, min_len=1):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise InvalidInputError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < min_len:
        raise InvalidInputError(f"need at least {min_len} values, got {a.size}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidInputError("inputs must be finite")
    return a, b


def pcc(a, b) -> float:
    a, b = _pair(a, b, 2)
    da, db = a - a.mean(), b - b.mean()
    ma, mb = np.abs(da).max(), np.abs(db).max()
    if ma == 0 or mb == 0:
        raise DegenerateInputError("correlation is undefined for a constant input")
    # scale-free, so rescale first: tiny deviations would otherwise square to zero
    da, db = da / ma, db / mb
    sa, sb = np.sqrt(da @ da), np.sqrt(db @ db)
    return float(np.clip((da @ db) / (sa * sb), -1.0, 1.0))


def scc(a, b) -> float:
    a, b = _pair(a, b, 2)
    return pcc(rankdata(a, method="average"), rankdata(b, method="average"))


def rmse(a, b) -> float:
    a, b = _pair(a, b, 1)
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass
class EvalReport:
    values: dict     # dimension -> {"pcc", "scc", "rmse"}
    n: int

    def __post_init__(self):
        for d, m in self.values.items():
            if not (-1 <= m["pcc"] <= 1 and -1 <= m["scc"] <= 1 and m["rmse"] >= 0):
                raise InvalidInputError(f"out-of-range measures for {d}: {m}")

    def to_table(self, sep: str = ",") -> str:
        """Rows are measures, columns the four dimensions; floats written with full precision."""
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=sep, lineterminator="\n")
        dims = [d for d in DIMENSIONS if d in self.values]
        w.writerow(["measure", *(DIMENSION_TITLES[d] for d in dims)])
        for m in MEASURES:
            w.writerow([MEASURE_TITLES[m], *(repr(float(self.values[d][m])) for d in dims)])
        w.writerow(["n", *([str(self.n)] * len(dims))])
        return buf.getvalue()

    @classmethod
    def from_table(cls, text: str, sep: str = ",") -> "EvalReport":
        rows = list(csv.reader(io.StringIO(text), delimiter=sep))
        titles = {v: k for k, v in DIMENSION_TITLES.items()}
        measures = {v: k for k, v in MEASURE_TITLES.items()}
        try:
            dims = [titles[c] for c in rows[0][1:]]
        except (KeyError, IndexError):
            raise InvalidInputError("unrecognised evaluation table header") from None
        values = {d: {} for d in dims}
        n = 0
        for row in rows[1:]:
            if row[0] == "n":
                n = int(row[1])
                continue
            m = measures.get(row[0])
            if m is None:
                raise InvalidInputError(f"unknown measure row {row[0]!r}")
            for d, cell in zip(dims, row[1:]):
                values[d][m] = float(cell)
        return cls(values, n)

    def pretty(self) -> str:
        dims = [d for d in DIMENSIONS if d in self.values]
        lines = [f"{'':6s}" + "".join(f"{DIMENSION_TITLES[d]:>11s}" for d in dims)]
        for m in MEASURES:
            lines.append(f"{MEASURE_TITLES[m]:6s}" + "".join(f"{self.values[d][m]:11.4f}" for d in dims))
        lines.append(f"n = {self.n}")
        return "\n".join(lines)


def scores_by_dimension(dists: dict, ids, dims=DIMENSIONS) -> dict:
    """dimension -> array of mean scores, in ``ids`` order. ``dists[id][dim]`` is a distribution."""
    return {d: np.array([mean_score(dists[i][d]) for i in ids]) for d in dims}


def evaluate(predictions: dict, truth: dict, dims=DIMENSIONS) -> EvalReport:
    """Measures per dimension between per-image predicted and true distributions.

    Both arguments map image id -> {dimension: distribution}; ids must match exactly.
    """
    if set(predictions) != set(truth):
        only_p = sorted(set(predictions) - set(truth))[:5]
        only_t = sorted(set(truth) - set(predictions))[:5]
        raise InvalidInputError(f"prediction/truth ids differ (only predicted: {only_p}, only truth: {only_t})")
    ids = sorted(truth)
    p = scores_by_dimension(predictions, ids, dims)
    t = scores_by_dimension(truth, ids, dims)
    values = {d: {"pcc": pcc(t[d], p[d]), "scc": scc(t[d], p[d]), "rmse": rmse(t[d], p[d])} for d in dims}
    return EvalReport(values, len(ids))
