"""Consistency metrics, logistic score mapping, and group-aware k-fold CV.

Correlations follow the usual quality-assessment protocol: SRCC and KRCC are
computed on raw predictions (rank metrics ignore monotone mappings), while
PLCC and RMSE are computed after fitting a five-parameter logistic from
predictions to labels.  Cross-validation splits by source content so no
reference ever straddles a train/test boundary.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import EvaluationError
from .sampling import Rng


def _pair(a, b, min_len: int):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise EvaluationError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < min_len:
        raise EvaluationError(f"need at least {min_len} samples, got {a.size}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise EvaluationError("non-finite values in metric input")
    return a, b


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0.0:
        raise EvaluationError("constant input: correlation undefined")
    r = float((da * db).sum() / denom)
    return max(-1.0, min(1.0, r))


def srcc(a, b) -> float:
    """Spearman rank correlation; ties get average (fractional) ranks."""
    a, b = _pair(a, b, 3)
    ra = stats.rankdata(a, method="average")
    rb = stats.rankdata(b, method="average")
    if np.ptp(ra) == 0 or np.ptp(rb) == 0:
        raise EvaluationError("constant input: rank correlation undefined")
    return _pearson(ra, rb)


def krcc(a, b) -> float:
    """Kendall rank correlation, tau-b (tie-corrected)."""
    a, b = _pair(a, b, 3)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise EvaluationError("constant input: rank correlation undefined")
    tau = float(stats.kendalltau(a, b, variant="b").statistic)
    return max(-1.0, min(1.0, tau))


def plcc(a, b) -> float:
    a, b = _pair(a, b, 3)
    return _pearson(a, b)


def rmse(a, b) -> float:
    a, b = _pair(a, b, 1)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _logistic(params: np.ndarray, q: np.ndarray) -> np.ndarray:
    b1, b2, b3, b4, b5 = params
    s = 1.0 / (1.0 + np.exp(np.clip(b2 * (q - b3), -500, 500)))
    return b1 * (0.5 - s) + b4 * q + b5


def _logistic_jacobian(params: np.ndarray, q: np.ndarray) -> np.ndarray:
    b1, b2, b3, _, _ = params
    s = 1.0 / (1.0 + np.exp(np.clip(b2 * (q - b3), -500, 500)))
    bell = s * (1.0 - s)
    J = np.empty((q.size, 5))
    J[:, 0] = 0.5 - s
    J[:, 1] = b1 * bell * (q - b3)
    J[:, 2] = -b1 * bell * b2
    J[:, 3] = q
    J[:, 4] = 1.0
    return J


@dataclass
class LogisticFit:
    params: np.ndarray
    mapped: np.ndarray
    converged: bool
    degenerate: bool = False


def _linear_lsq(pred: np.ndarray, mos: np.ndarray) -> tuple[float, float]:
    dp = pred - pred.mean()
    denom = float((dp * dp).sum())
    slope = float((dp * (mos - mos.mean())).sum() / denom) if denom > 0 else 0.0
    return slope, float(mos.mean() - slope * pred.mean())


def logistic_fit(pred, mos, max_iter: int = 500, step_tol: float = 1e-10) -> LogisticFit:
    """Fit the five-parameter logistic mapping by damped least squares.

    m(q) = b1*(1/2 - 1/(1+exp(b2*(q-b3)))) + b4*q + b5, initialized at
    b1=range(mos), b2=4/range(pred), b3=median(pred), b4=0, b5=mean(mos).
    The straight line is inside the family (b1=0), and a closed-form linear
    fit is kept as a floor, so the mapping never loses to it.  A fit that
    stops on the iteration cap is returned with converged=False.
    """
    pred, mos = _pair(pred, mos, 5)
    if np.ptp(pred) == 0:
        return LogisticFit(
            params=np.array([0.0, 1.0, 0.0, 1.0, 0.0]),
            mapped=pred.copy(),
            converged=False,
            degenerate=True,
        )

    beta = np.array(
        [np.ptp(mos), 4.0 / np.ptp(pred), float(np.median(pred)), 0.0, float(np.mean(mos))]
    )
    resid = _logistic(beta, pred) - mos
    sse = float(resid @ resid)
    lam = 1e-3
    converged = False

    for _ in range(max_iter):
        J = _logistic_jacobian(beta, pred)
        JtJ = J.T @ J
        g = J.T @ resid
        damped = JtJ + lam * np.diag(np.maximum(np.diag(JtJ), 1e-12))
        try:
            step = np.linalg.solve(damped, -g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(damped, -g, rcond=None)[0]
        cand = beta + step
        cand_resid = _logistic(cand, pred) - mos
        cand_sse = float(cand_resid @ cand_resid)
        if np.isfinite(cand_sse) and cand_sse <= sse:
            beta, resid, sse = cand, cand_resid, cand_sse
            lam = max(lam / 3.0, 1e-12)
            if np.linalg.norm(step) <= step_tol * (np.linalg.norm(beta) + step_tol):
                converged = True
                break
        else:
            lam *= 3.0
            if lam > 1e12:
                break

    slope, intercept = _linear_lsq(pred, mos)
    lin_mapped = slope * pred + intercept
    lin_sse = float(((lin_mapped - mos) ** 2).sum())
    if lin_sse < sse:
        beta = np.array(
            [0.0, 4.0 / np.ptp(pred), float(np.median(pred)), slope, intercept]
        )
        return LogisticFit(beta, lin_mapped, converged=True)
    return LogisticFit(beta, _logistic(beta, pred), converged=converged)


@dataclass
class EvalReport:
    """The four consistency criteria for one prediction run (or fold mean)."""

    srcc: float
    plcc: float
    krcc: float
    rmse: float
    logistic: np.ndarray
    n: int
    fit_converged: bool = True

    def __post_init__(self):
        for name in ("srcc", "plcc", "krcc"):
            v = getattr(self, name)
            if not -1.0 <= v <= 1.0:
                raise EvaluationError(f"{name}={v} outside [-1, 1]")
        if self.rmse < 0:
            raise EvaluationError("rmse must be non-negative")
        if self.n < 3:
            raise EvaluationError(f"report needs n >= 3 samples, got {self.n}")
        self.logistic = np.asarray(self.logistic, dtype=np.float64).reshape(5)

    def to_dict(self) -> dict:
        return {
            "srcc": self.srcc,
            "plcc": self.plcc,
            "krcc": self.krcc,
            "rmse": self.rmse,
            "logistic": [float(v) for v in self.logistic],
            "n": self.n,
            "fit_converged": self.fit_converged,
        }


def evaluate_run(pred, mos) -> EvalReport:
    """Single-run report: SRCC/KRCC on raw values, PLCC/RMSE on mapped ones."""
    pred, mos = _pair(pred, mos, 3)
    if pred.size >= 5:
        fit = logistic_fit(pred, mos)
        mapped, params, converged = fit.mapped, fit.params, fit.converged
    else:
        slope, intercept = _linear_lsq(pred, mos)
        mapped = slope * pred + intercept
        params = np.array([0.0, 1.0, 0.0, slope, intercept])
        converged = True
    return EvalReport(
        srcc=srcc(pred, mos),
        plcc=plcc(mapped, mos),
        krcc=krcc(pred, mos),
        rmse=rmse(mapped, mos),
        logistic=params,
        n=int(pred.size),
        fit_converged=converged,
    )


def aggregate_folds(reports) -> EvalReport:
    """Arithmetic mean of each criterion across fold reports."""
    reports = list(reports)
    if not reports:
        raise EvaluationError("no fold reports to aggregate")
    return EvalReport(
        srcc=float(np.mean([r.srcc for r in reports])),
        plcc=float(np.mean([r.plcc for r in reports])),
        krcc=float(np.mean([r.krcc for r in reports])),
        rmse=float(np.mean([r.rmse for r in reports])),
        logistic=np.mean([r.logistic for r in reports], axis=0),
        n=int(sum(r.n for r in reports)),
        fit_converged=all(r.fit_converged for r in reports),
    )


@dataclass
class FoldPlan:
    """Content-disjoint fold assignment: every group's items share one fold."""

    k: int
    assignments: dict
    group_key: dict

    def __post_init__(self):
        folds = set(self.assignments.values())
        if not folds.issubset(range(self.k)):
            raise EvaluationError("fold indices out of range")
        group_fold = {}
        for item, fold in self.assignments.items():
            g = self.group_key[item]
            if group_fold.setdefault(g, fold) != fold:
                raise EvaluationError(f"group {g!r} straddles folds")

    def items_in_fold(self, fold: int) -> list:
        return [i for i, f in self.assignments.items() if f == fold]

    def items_outside_fold(self, fold: int) -> list:
        return [i for i, f in self.assignments.items() if f != fold]


def kfold_split(items, k: int, seed: int) -> FoldPlan:
    """Shuffle groups by seed and deal them round-robin to k folds.

    `items` is a sequence of (item_id, group_id) pairs; all items of a group
    land in the same fold.
    """
    items = list(items)
    if not items:
        raise EvaluationError("no items to split")
    if k < 2:
        raise EvaluationError(f"fold count must be at least 2, got {k}")
    group_key = {}
    groups_in_order = []
    for item_id, group_id in items:
        if item_id in group_key:
            raise EvaluationError(f"duplicate item_id {item_id!r}")
        group_key[item_id] = group_id
        if group_id not in groups_in_order:
            groups_in_order.append(group_id)
    if k > len(groups_in_order):
        raise EvaluationError(
            f"cannot make {k} content-disjoint folds from "
            f"{len(groups_in_order)} groups"
        )
    rng = Rng(seed)
    perm = rng.permutation(len(groups_in_order))
    fold_of_group = {
        groups_in_order[g]: pos % k for pos, g in enumerate(perm)
    }
    assignments = {item: fold_of_group[group] for item, group in items}
    return FoldPlan(k=k, assignments=assignments, group_key=group_key)


@dataclass
class DatasetItem:
    item_id: str
    model_path: Path
    group_id: str
    mos: float


def read_dataset_manifest(path) -> list[DatasetItem]:
    """Read the CSV dataset manifest: model_path, group_id, mos.

    Relative model paths resolve against the CSV's directory.
    """
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = {"model_path", "group_id", "mos"} - set(header)
            if missing:
                raise EvaluationError(
                    f"dataset manifest missing columns: {sorted(missing)}"
                )
            items = []
            for lineno, row in enumerate(reader, start=2):
                raw = (row["model_path"] or "").strip()
                if not raw:
                    raise EvaluationError(f"{path}:{lineno}: empty model_path")
                try:
                    mos = float(row["mos"])
                except (TypeError, ValueError):
                    raise EvaluationError(
                        f"{path}:{lineno}: mos {row['mos']!r} is not a number"
                    )
                if not np.isfinite(mos):
                    raise EvaluationError(f"{path}:{lineno}: non-finite mos")
                model_path = Path(raw)
                if not model_path.is_absolute():
                    model_path = path.parent / model_path
                items.append(DatasetItem(raw, model_path, str(row["group_id"]).strip(), mos))
    except OSError as exc:
        raise EvaluationError(f"cannot read dataset manifest: {exc}")
    if not items:
        raise EvaluationError(f"dataset manifest {path} has no rows")
    ids = [it.item_id for it in items]
    if len(set(ids)) != len(ids):
        raise EvaluationError("duplicate model_path entries in dataset manifest")
    return items


_COLUMNS = ("SRCC", "PLCC", "KRCC", "RMSE")


def report_table(rows: dict) -> str:
    """Aligned text table; `rows` maps a row label to an EvalReport."""
    label_w = max(len("run"), *(len(str(k)) for k in rows)) if rows else 3
    header = f"{'run':<{label_w}}  " + "  ".join(f"{c:>7}" for c in _COLUMNS)
    lines = [header, "-" * len(header)]
    for label, rep in rows.items():
        vals = (rep.srcc, rep.plcc, rep.krcc, rep.rmse)
        lines.append(
            f"{str(label):<{label_w}}  " + "  ".join(f"{v:>7.4f}" for v in vals)
        )
    return "\n".join(lines)


def report_json(rows: dict, extra: dict | None = None) -> str:
    doc = {label: rep.to_dict() for label, rep in rows.items()}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2)
