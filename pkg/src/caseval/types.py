"""Core data model: sessions, SERP items, rating histograms, parameters and variants.

Every type here is an immutable value. JSON encoding uses the field names of
the dataclasses verbatim; rating histograms are plain integer arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

D_GRADES = 3
R_GRADES = 4


class ConfigurationError(ValueError):
    """Raised when inputs are structurally incompatible (dimensions, unfitted state)."""


class SessionFormatError(ValueError):
    """A malformed line in a JSONL input file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class ItemType(str, Enum):
    WEB = "Web"
    NEWS = "News"
    WEATHER = "Weather"
    CURRENCY = "Currency"
    KNOWLEDGE_PANEL = "KnowledgePanel"
    IMAGE = "Image"
    VIDEO = "Video"
    MAPS = "Maps"
    ANSWER = "Answer"
    OTHER = "Other"

    @classmethod
    def parse(cls, value: str) -> "ItemType":
        """Map an upstream type name onto the closed enum; unknown names become Other."""
        try:
            return cls(value)
        except ValueError:
            return cls.OTHER


ITEM_TYPES: tuple[ItemType, ...] = tuple(ItemType)


@dataclass(frozen=True)
class RatingHistogram:
    """Counts of rater grades for one item, lowest grade first.

    An all-zero histogram means "unrated"; :meth:`expanded` turns it into a
    single vote for grade 0.
    """

    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))

    @classmethod
    def empty(cls, n_grades: int) -> "RatingHistogram":
        return cls((0,) * n_grades)

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def is_rated(self) -> bool:
        return self.total > 0

    def expanded(self) -> np.ndarray:
        if self.is_rated:
            return np.asarray(self.counts, dtype=float)
        out = np.zeros(len(self.counts))
        out[0] = 1.0
        return out

    def relevance_bucket(self) -> int:
        """Rounded mean grade (ties round up); unrated histograms give 0."""
        counts = self.expanded()
        mean = float(np.dot(np.arange(len(counts)), counts) / counts.sum())
        return int(math.floor(mean + 0.5))

    def violations(self, expected_len: int, label: str) -> list[str]:
        out = []
        if len(self.counts) != expected_len:
            out.append(f"{label}: expected {expected_len} grades, got {len(self.counts)}")
        if any(c < 0 for c in self.counts):
            out.append(f"{label}: negative count")
        return out


@dataclass(frozen=True)
class SerpItem:
    item_id: str
    perceived_rank: int
    item_type: ItemType = ItemType.WEB
    offset_top: float = 0.0
    column: int = 0
    width: float = 600.0
    height: float = 100.0
    d_ratings: RatingHistogram = field(default_factory=lambda: RatingHistogram.empty(D_GRADES))
    r_ratings: RatingHistogram = field(default_factory=lambda: RatingHistogram.empty(R_GRADES))
    clicked: bool = False
    mouse_fixated: bool = False

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "perceived_rank": self.perceived_rank,
            "item_type": self.item_type.value,
            "offset_top": self.offset_top,
            "column": self.column,
            "width": self.width,
            "height": self.height,
            "d_ratings": list(self.d_ratings.counts),
            "r_ratings": list(self.r_ratings.counts),
            "clicked": self.clicked,
            "mouse_fixated": self.mouse_fixated,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SerpItem":
        return cls(
            item_id=str(d["item_id"]),
            perceived_rank=int(d["perceived_rank"]),
            item_type=ItemType.parse(d.get("item_type", "Web")),
            offset_top=float(d["offset_top"]),
            column=int(d["column"]),
            width=float(d["width"]),
            height=float(d["height"]),
            d_ratings=RatingHistogram(tuple(d.get("d_ratings", (0,) * D_GRADES))),
            r_ratings=RatingHistogram(tuple(d.get("r_ratings", (0,) * R_GRADES))),
            clicked=bool(d.get("clicked", False)),
            mouse_fixated=bool(d.get("mouse_fixated", False)),
        )


@dataclass(frozen=True)
class Session:
    session_id: str
    query: str
    items: tuple[SerpItem, ...]
    satisfaction: bool | None = None

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))

    @property
    def is_labeled(self) -> bool:
        return self.satisfaction is not None

    @property
    def is_heterogeneous(self) -> bool:
        return any(it.item_type is not ItemType.WEB for it in self.items)

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "query": self.query,
            "items": [it.to_dict() for it in self.items],
            "satisfaction": self.satisfaction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Session":
        sat = d.get("satisfaction")
        return cls(
            session_id=str(d["session_id"]),
            query=str(d.get("query", "")),
            items=tuple(SerpItem.from_dict(it) for it in d["items"]),
            satisfaction=None if sat is None else bool(sat),
        )


@dataclass(frozen=True)
class ModelVariant:
    """Which feature groups, labels and objective terms a CAS fit uses."""

    use_rank: bool = True
    use_classes: bool = True
    use_geometry: bool = True
    use_d_labels: bool = True
    use_sat_term: bool = True
    reg_lambda: float = 0.1

    def violations(self) -> list[str]:
        out = []
        if not (self.use_rank or self.use_classes or self.use_geometry):
            out.append("no attention feature group enabled")
        if not (self.reg_lambda >= 0 and math.isfinite(self.reg_lambda)):
            out.append("reg_lambda must be a non-negative finite number")
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelVariant":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    @classmethod
    def preset(cls, name: str, reg_lambda: float | None = None) -> "ModelVariant":
        if name not in VARIANT_PRESETS:
            raise ConfigurationError(
                f"unknown variant {name!r}; valid names: {', '.join(VARIANT_PRESETS)}"
            )
        v = VARIANT_PRESETS[name]
        if reg_lambda is not None and name != "CASnoreg":
            v = replace(v, reg_lambda=float(reg_lambda))
        return v


DEFAULT_LAMBDA = 0.1

VARIANT_PRESETS: dict[str, ModelVariant] = {
    "CAS": ModelVariant(),
    "CASnod": ModelVariant(use_d_labels=False),
    "CASnosat": ModelVariant(use_sat_term=False),
    "CASnoreg": ModelVariant(reg_lambda=0.0),
    "CASrank": ModelVariant(use_classes=False, use_geometry=False),
    "CASnogeom": ModelVariant(use_geometry=False),
    "CASnoclass": ModelVariant(use_classes=False),
}


@dataclass(frozen=True)
class CasParams:
    """All learned scalars of a CAS model.

    ``fixation_logit`` is the log-odds that an examined item leaves a mouse
    fixation; it lets the likelihood treat missing fixations as weak evidence.
    """

    attention_weights: tuple[float, ...]
    alpha_intercept: float = 0.0
    alpha_weights: tuple[float, ...] = (0.0,) * R_GRADES
    tau_d: tuple[float, ...] = (0.0,) * D_GRADES
    tau_r: tuple[float, ...] = (0.0,) * R_GRADES
    tau_0: float = 0.0
    fixation_logit: float = 0.0

    def __post_init__(self):
        for name in ("attention_weights", "alpha_weights", "tau_d", "tau_r"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        for name in ("alpha_intercept", "tau_0", "fixation_logit"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def zeros(cls, n_attention: int) -> "CasParams":
        return cls(attention_weights=(0.0,) * n_attention)

    def is_finite(self) -> bool:
        return all(math.isfinite(x) for x in self.flat())

    def flat(self) -> list[float]:
        return [
            *self.attention_weights,
            self.alpha_intercept,
            *self.alpha_weights,
            *self.tau_d,
            *self.tau_r,
            self.tau_0,
            self.fixation_logit,
        ]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "CasParams":
        return cls(**d)


def validate_session(session: Session) -> list[str]:
    """Return every invariant violation of ``session``; an empty list means valid."""
    problems: list[str] = []
    if not session.items:
        return ["items empty"]
    seen: dict[int, str] = {}
    for k, it in enumerate(session.items):
        where = f"item {k} ({it.item_id})"
        if it.perceived_rank < 1:
            problems.append(f"{where}: perceived_rank must be >= 1")
        if not it.width > 0:
            problems.append(f"{where}: width must be > 0")
        if not it.height > 0:
            problems.append(f"{where}: height must be > 0")
        if not it.offset_top >= 0:
            problems.append(f"{where}: offset_top must be >= 0")
        if it.column not in (0, 1):
            problems.append(f"{where}: column must be 0 or 1")
        problems += it.d_ratings.violations(D_GRADES, f"{where} d_ratings")
        problems += it.r_ratings.violations(R_GRADES, f"{where} r_ratings")
        if it.perceived_rank in seen:
            problems.append(
                f"duplicate perceived_rank {it.perceived_rank} "
                f"({seen[it.perceived_rank]} and {it.item_id})"
            )
        else:
            seen[it.perceived_rank] = it.item_id
    return problems


def encode_session(session: Session) -> str:
    return json.dumps(session.to_dict(), separators=(",", ":"))


def decode_session(line: str, lineno: int | None = None) -> Session:
    try:
        return Session.from_dict(json.loads(line))
    except json.JSONDecodeError as e:
        raise SessionFormatError(f"invalid JSON ({e.msg})", lineno) from None
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise SessionFormatError(f"bad session record: {e!r}", lineno) from None


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, str]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                yield lineno, line


def read_sessions(path: str | Path, validate: bool = True) -> list[Session]:
    sessions = []
    for lineno, line in iter_jsonl(path):
        s = decode_session(line, lineno)
        if validate:
            problems = validate_session(s)
            if problems:
                raise SessionFormatError("; ".join(problems), lineno)
        sessions.append(s)
    return sessions


def write_sessions(path: str | Path, sessions: Iterable[Session]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sessions:
            fh.write(encode_session(s) + "\n")
