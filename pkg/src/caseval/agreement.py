"""Rater agreement statistics and spammer filtering over raw rating records.

Ratings are filtered separately per label kind: a worker dropped for sloppy
D labels may still contribute R labels.
"""

from __future__ import annotations

import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .types import D_GRADES, R_GRADES, SessionFormatError, iter_jsonl

LABEL_KINDS = ("D", "R")
N_GRADES = {"D": D_GRADES, "R": R_GRADES}
ALPHA_METRICS = ("nominal", "ordinal")


@dataclass(frozen=True)
class RatingRecord:
    worker_id: str
    item_id: str
    label_kind: str
    grade: int
    justification_text: str | None = None
    source_text: str | None = None

    def violations(self) -> list[str]:
        if self.label_kind not in N_GRADES:
            return [f"label_kind must be one of {LABEL_KINDS}, got {self.label_kind!r}"]
        top = N_GRADES[self.label_kind] - 1
        if not 0 <= self.grade <= top:
            return [f"{self.label_kind} grade {self.grade} outside 0..{top}"]
        return []

    def to_dict(self) -> dict:
        out = {
            "worker_id": self.worker_id,
            "item_id": self.item_id,
            "label_kind": self.label_kind,
            "grade": self.grade,
        }
        if self.justification_text is not None:
            out["justification_text"] = self.justification_text
        if self.source_text is not None:
            out["source_text"] = self.source_text
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RatingRecord":
        grade = d["grade"]
        if isinstance(grade, bool) or not isinstance(grade, int):
            raise TypeError(f"grade must be an integer, got {grade!r}")
        return cls(
            worker_id=str(d["worker_id"]),
            item_id=str(d["item_id"]),
            label_kind=str(d["label_kind"]),
            grade=grade,
            justification_text=d.get("justification_text"),
            source_text=d.get("source_text"),
        )


def read_ratings(path: str | Path) -> list[RatingRecord]:
    """Parse a ratings JSONL file; errors carry the 1-based line number."""
    out = []
    for lineno, line in iter_jsonl(path):
        try:
            rec = RatingRecord.from_dict(json.loads(line))
        except json.JSONDecodeError as e:
            raise SessionFormatError(f"invalid JSON ({e.msg})", lineno) from None
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise SessionFormatError(f"bad rating record: {e!r}", lineno) from None
        problems = rec.violations()
        if problems:
            raise SessionFormatError("; ".join(problems), lineno)
        out.append(rec)
    return out


def write_ratings(path: str | Path, records: Iterable[RatingRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), separators=(",", ":")) + "\n")


# ---------------------------------------------------------------- statistics


def cohen_kappa(a: Sequence[int], b: Sequence[int]) -> float | None:
    """Nominal Cohen's kappa of two paired grade sequences.

    When chance agreement is 1 (both raters constant on the same grade) the
    value is 1.0; ``None`` is returned when it is otherwise undefined.
    """
    if len(a) != len(b):
        raise ValueError("grade sequences must have equal length")
    n = len(a)
    if n == 0:
        return None
    p_o = sum(x == y for x, y in zip(a, b)) / n
    ca, cb = Counter(a), Counter(b)
    p_e = sum(ca[k] * cb[k] for k in ca) / (n * n)
    if p_e >= 1.0:
        return 1.0 if p_o == 1.0 else None
    return (p_o - p_e) / (1.0 - p_e)


def _by_worker(records: Iterable[RatingRecord]) -> dict[str, dict[str, int]]:
    # a repeated (worker, item) keeps the first grade
    out: dict[str, dict[str, int]] = defaultdict(dict)
    for r in records:
        out[r.worker_id].setdefault(r.item_id, r.grade)
    return out


def _pair_kappas(records: Iterable[RatingRecord]) -> dict[tuple[str, str], float]:
    grades = _by_worker(records)
    out = {}
    for u, v in combinations(sorted(grades), 2):
        shared = sorted(grades[u].keys() & grades[v].keys())
        if not shared:
            continue
        k = cohen_kappa([grades[u][i] for i in shared], [grades[v][i] for i in shared])
        if k is not None:
            out[(u, v)] = k
    return out


def average_pairwise_kappa(records: Iterable[RatingRecord]) -> float | None:
    """Mean kappa over worker pairs with at least one co-rated item.

    Pairs whose kappa is undefined are left out. Pass records of one label
    kind at a time.
    """
    kappas = _pair_kappas(records)
    return float(np.mean(list(kappas.values()))) if kappas else None


def worker_kappas(records: Iterable[RatingRecord]) -> dict[str, float]:
    """Each worker's mean kappa with every co-rating worker."""
    acc: dict[str, list[float]] = defaultdict(list)
    for (u, v), k in _pair_kappas(records).items():
        acc[u].append(k)
        acc[v].append(k)
    return {w: float(np.mean(ks)) for w, ks in acc.items()}


def coincidence_matrix(records: Iterable[RatingRecord]) -> tuple[list[int], np.ndarray]:
    """Observed coincidences between grades within items.

    Items with a single rating are unpairable and contribute nothing.
    """
    units: dict[str, list[int]] = defaultdict(list)
    for r in records:
        units[r.item_id].append(r.grade)
    values = sorted({g for gs in units.values() if len(gs) > 1 for g in gs})
    index = {v: i for i, v in enumerate(values)}
    o = np.zeros((len(values), len(values)))
    for gs in units.values():
        m = len(gs)
        if m < 2:
            continue
        counts = np.zeros(len(values))
        for g in gs:
            counts[index[g]] += 1
        o += (np.outer(counts, counts) - np.diag(counts)) / (m - 1)
    return values, o


def _delta2(n_c: np.ndarray, metric: str) -> np.ndarray:
    k = len(n_c)
    if metric == "nominal":
        return 1.0 - np.eye(k)
    if metric == "ordinal":
        cum = np.concatenate([[0.0], np.cumsum(n_c)])
        d = np.zeros((k, k))
        for c in range(k):
            for e in range(c, k):
                d[c, e] = d[e, c] = (cum[e + 1] - cum[c] - (n_c[c] + n_c[e]) / 2.0) ** 2
        return d
    raise ValueError(f"metric must be one of {ALPHA_METRICS}, got {metric!r}")


def krippendorff_alpha(records: Iterable[RatingRecord], metric: str = "nominal") -> float | None:
    """Krippendorff's alpha from the coincidence matrix; ``None`` when expected disagreement is 0."""
    if metric not in ALPHA_METRICS:
        raise ValueError(f"metric must be one of {ALPHA_METRICS}, got {metric!r}")
    _, o = coincidence_matrix(records)
    n_c = o.sum(axis=1)
    n = n_c.sum()
    if n <= 1:
        return None
    d2 = _delta2(n_c, metric)
    d_e = float(np.sum(np.outer(n_c, n_c) * d2))
    if d_e <= 0:
        return None
    return 1.0 - (n - 1) * float(np.sum(o * d2)) / d_e


# ---------------------------------------------------------------- filtering


@dataclass(frozen=True)
class FilterPolicy:
    min_ratings: int = 3
    require_quote: bool = True
    disagreement_threshold: float | None = None
    allowlist: frozenset[str] = frozenset()

    def to_dict(self) -> dict:
        return {
            "min_ratings": self.min_ratings,
            "require_quote": self.require_quote,
            "disagreement_threshold": self.disagreement_threshold,
            "allowlist": sorted(self.allowlist),
        }


_WS = re.compile(r"\s+")


def _normalize(text: str) -> str:
    return _WS.sub(" ", text).strip().casefold()


def quote_ok(record: RatingRecord) -> bool:
    """Justification must occur in the source text; vacuous when either is missing."""
    if record.justification_text is None or record.source_text is None:
        return True
    return _normalize(record.justification_text) in _normalize(record.source_text)


@dataclass
class FilterResult:
    kept: list[RatingRecord]
    removed: dict[str, dict[str, list[str]]]  # label kind -> worker -> reasons

    def removed_workers(self, kind: str) -> set[str]:
        return set(self.removed.get(kind, {}))

    def to_dict(self) -> dict:
        return {
            kind: [{"worker_id": w, "reasons": rs} for w, rs in sorted(workers.items())]
            for kind, workers in self.removed.items()
        }


def _filter_kind(records: list[RatingRecord], policy: FilterPolicy) -> dict[str, list[str]]:
    reasons: dict[str, list[str]] = defaultdict(list)
    counts = Counter(r.worker_id for r in records)
    for w, c in counts.items():
        if c < policy.min_ratings:
            reasons[w].append("min_ratings")
    if policy.require_quote:
        for w in sorted({r.worker_id for r in records if not quote_ok(r)}):
            reasons[w].append("quote")
    for w in policy.allowlist:
        reasons.pop(w, None)
    if policy.disagreement_threshold is not None:
        # repeat until stable so that filtering the output again is a no-op
        while True:
            alive = [r for r in records if r.worker_id not in reasons]
            low = [
                w
                for w, k in worker_kappas(alive).items()
                if k < policy.disagreement_threshold and w not in policy.allowlist
            ]
            if not low:
                break
            for w in low:
                reasons[w].append("disagreement")
    return dict(sorted(reasons.items()))


def filter_spammers(records: Sequence[RatingRecord], policy: FilterPolicy = FilterPolicy()) -> FilterResult:
    """Drop ratings of workers failing any filter; each kind is filtered on its own."""
    removed = {}
    for kind in LABEL_KINDS:
        subset = [r for r in records if r.label_kind == kind]
        removed[kind] = _filter_kind(subset, policy)
    kept = [r for r in records if r.worker_id not in removed[r.label_kind]]
    return FilterResult(kept, removed)


# ---------------------------------------------------------------- reporting


@dataclass
class AgreementRow:
    label_kind: str
    workers: int
    workers_removed: int
    ratings: int
    ratings_removed: int
    kappa: float | None
    alpha: float | None

    @property
    def pct_workers_removed(self) -> float | None:
        return 100.0 * self.workers_removed / self.workers if self.workers else None

    @property
    def pct_ratings_removed(self) -> float | None:
        return 100.0 * self.ratings_removed / self.ratings if self.ratings else None

    def to_dict(self) -> dict:
        return {
            "label": self.label_kind,
            "pct_workers_removed": self.pct_workers_removed,
            "pct_ratings_removed": self.pct_ratings_removed,
            "cohen_kappa": self.kappa,
            "krippendorff_alpha": self.alpha,
            "workers": self.workers,
            "workers_removed": self.workers_removed,
            "ratings": self.ratings,
            "ratings_removed": self.ratings_removed,
        }


@dataclass
class AgreementReport:
    rows: list[AgreementRow]
    policy: FilterPolicy
    alpha_metric: str
    removed: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy.to_dict(),
            "alpha_metric": self.alpha_metric,
            "table": [r.to_dict() for r in self.rows],
            "removed_workers": self.removed,
        }

    def to_csv(self) -> str:
        cols = ["label", "pct_workers_removed", "pct_ratings_removed", "cohen_kappa", "krippendorff_alpha"]
        lines = [",".join(cols)]
        for r in self.rows:
            d = r.to_dict()
            lines.append(",".join("" if d[c] is None else str(d[c]) for c in cols))
        return "\n".join(lines) + "\n"


def agreement_report(
    records: Sequence[RatingRecord], policy: FilterPolicy = FilterPolicy(), alpha_metric: str = "nominal"
) -> tuple[AgreementReport, FilterResult]:
    """Filter spammers and summarise agreement among the remaining workers per label kind."""
    result = filter_spammers(records, policy)
    rows = []
    for kind in LABEL_KINDS:
        before = [r for r in records if r.label_kind == kind]
        after = [r for r in result.kept if r.label_kind == kind]
        rows.append(
            AgreementRow(
                label_kind=kind,
                workers=len({r.worker_id for r in before}),
                workers_removed=len(result.removed[kind]),
                ratings=len(before),
                ratings_removed=len(before) - len(after),
                kappa=average_pairwise_kappa(after),
                alpha=krippendorff_alpha(after, alpha_metric),
            )
        )
    return AgreementReport(rows, policy, alpha_metric, result.to_dict()), result


def aggregate_histograms(records: Iterable[RatingRecord]) -> dict[str, dict[str, list[int]]]:
    """Fold ratings into per-item grade histograms in session-file layout."""
    out: dict[str, dict[str, list[int]]] = {}
    for r in records:
        entry = out.setdefault(r.item_id, {"d_ratings": [0] * D_GRADES, "r_ratings": [0] * R_GRADES})
        entry["d_ratings" if r.label_kind == "D" else "r_ratings"][r.grade] += 1
    return dict(sorted(out.items()))
