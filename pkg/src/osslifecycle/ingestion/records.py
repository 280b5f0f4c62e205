"""Data records for repository activity and on-disk corpus formats.

Corpus files are newline-delimited JSON, one repository per line::

    {"repo_id": "owner/name",
     "metadata": {"repo_id": ..., "unique_contributors_total": int,
                  "stargazers": int, "created_at": "YYYY-MM-DD",
                  "window_start": "YYYY-MM", "window_end": "YYYY-MM"},
     "months": [{<20 metric name>: float, ...}, ... 24 entries],
     "label": "toy" | "contribMid" | "club" | "federation" | null}

The wide CSV variant has one row per repo-month with columns
``repo_id, month_index, <20 metrics>, label``.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import json
import math
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from ..schema import METRICS, N_METRICS, T_MONTHS, Stage, parse_stage


@dataclasses.dataclass(frozen=True)
class Month:
    """A calendar month."""

    year: int
    month: int

    def __post_init__(self) -> None:
        if not 1 <= self.month <= 12:
            raise ValueError(f"month out of range: {self.month}")

    @classmethod
    def parse(cls, text: str) -> "Month":
        year, month = text.split("-")[:2]
        return cls(int(year), int(month))

    @classmethod
    def of(cls, when: dt.date | dt.datetime) -> "Month":
        return cls(when.year, when.month)

    def shift(self, n: int) -> "Month":
        k = self.year * 12 + (self.month - 1) + n
        return Month(k // 12, k % 12 + 1)

    def ordinal(self) -> int:
        return self.year * 12 + self.month - 1

    def first_day(self) -> dt.date:
        return dt.date(self.year, self.month, 1)

    def __str__(self) -> str:
        return f"{self.year:04d}-{self.month:02d}"


@dataclasses.dataclass(frozen=True)
class Window:
    """A contiguous observation window of ``T_MONTHS`` calendar months."""

    start: Month
    length: int = T_MONTHS

    def __post_init__(self) -> None:
        if self.length != T_MONTHS:
            raise ValueError(f"observation window must span {T_MONTHS} months, got {self.length}")

    @classmethod
    def ending(cls, end: Month) -> "Window":
        return cls(end.shift(-(T_MONTHS - 1)))

    @property
    def end(self) -> Month:
        return self.start.shift(self.length - 1)

    def months(self) -> list[Month]:
        return [self.start.shift(i) for i in range(self.length)]

    def index_of(self, when: dt.date | dt.datetime) -> int | None:
        """Month index of ``when`` inside the window, or None if outside."""
        k = Month.of(when).ordinal() - self.start.ordinal()
        return k if 0 <= k < self.length else None

    def start_datetime(self) -> dt.datetime:
        return dt.datetime(self.start.year, self.start.month, 1, tzinfo=dt.timezone.utc)

    def end_datetime(self) -> dt.datetime:
        """Exclusive upper bound (first instant after the window)."""
        nxt = self.end.shift(1)
        return dt.datetime(nxt.year, nxt.month, 1, tzinfo=dt.timezone.utc)

    def key(self) -> str:
        return f"{self.start}_{self.end}"


@dataclasses.dataclass(frozen=True)
class MonthlyActivityRecord:
    """One repository-month of the 20 base activity metrics."""

    repo_id: str
    month_index: int
    commit_count: float = 0.0
    committer_count: float = 0.0
    pull_requests: float = 0.0
    pr_avg_commits: float = 0.0
    pr_avg_files: float = 0.0
    pr_total_files: float = 0.0
    bot_contributors: float = 0.0
    new_contributors: float = 0.0
    repeat_contributors: float = 0.0
    bus_factor: float = 0.0
    issues_count: float = 0.0
    issue_comments: float = 0.0
    issue_duration_days: float = 0.0
    issue_ttfr_days: float = 0.0
    pr_review_comments: float = 0.0
    pr_review_duration_days: float = 0.0
    pr_total_comments: float = 0.0
    pr_ttfr_days: float = 0.0
    pr_acceptance_rate: float = 0.0
    releases: float = 0.0

    def __post_init__(self) -> None:
        if not 0 <= self.month_index < T_MONTHS:
            raise ValueError(f"month_index must be in [0, {T_MONTHS}), got {self.month_index}")
        for name in METRICS:
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{self.repo_id}[{self.month_index}].{name} must be finite and >= 0, got {v}")
        if self.pr_acceptance_rate > 1.0:
            raise ValueError(f"pr_acceptance_rate must be in [0, 1], got {self.pr_acceptance_rate}")

    def values(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in METRICS], dtype=np.float64)

    def as_dict(self) -> dict[str, float]:
        return {name: float(getattr(self, name)) for name in METRICS}


def records_to_matrix(records: Sequence[MonthlyActivityRecord]) -> np.ndarray:
    """Stack 24 chronological records into a (24, 20) matrix."""
    if len(records) != T_MONTHS:
        raise ValueError(f"expected {T_MONTHS} monthly records, got {len(records)}")
    idx = [r.month_index for r in records]
    if idx != list(range(T_MONTHS)):
        raise ValueError(f"month indices must be 0..{T_MONTHS - 1} in order, got {idx}")
    return np.stack([r.values() for r in records])


def matrix_to_records(repo_id: str, months: np.ndarray) -> list[MonthlyActivityRecord]:
    months = np.asarray(months, dtype=np.float64)
    if months.shape != (T_MONTHS, N_METRICS):
        raise ValueError(f"expected shape ({T_MONTHS}, {N_METRICS}), got {months.shape}")
    return [
        MonthlyActivityRecord(repo_id, t, **{name: float(months[t, j]) for j, name in enumerate(METRICS)})
        for t in range(T_MONTHS)
    ]


@dataclasses.dataclass(frozen=True)
class RepoMetadata:
    """Project-level snapshot used for labeling."""

    repo_id: str
    unique_contributors_total: int
    stargazers: int
    created_at: dt.date
    window_start: Month
    window_end: Month

    def __post_init__(self) -> None:
        if self.unique_contributors_total < 0 or self.stargazers < 0:
            raise ValueError(f"{self.repo_id}: contributor and stargazer counts must be non-negative")
        span = self.window_end.ordinal() - self.window_start.ordinal() + 1
        if span != T_MONTHS:
            raise ValueError(f"{self.repo_id}: metadata window spans {span} months, expected {T_MONTHS}")

    @property
    def window(self) -> Window:
        return Window(self.window_start)

    def to_json(self) -> dict:
        return {
            "repo_id": self.repo_id,
            "unique_contributors_total": int(self.unique_contributors_total),
            "stargazers": int(self.stargazers),
            "created_at": self.created_at.isoformat(),
            "window_start": str(self.window_start),
            "window_end": str(self.window_end),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RepoMetadata":
        return cls(
            repo_id=obj["repo_id"],
            unique_contributors_total=int(obj["unique_contributors_total"]),
            stargazers=int(obj["stargazers"]),
            created_at=dt.date.fromisoformat(obj["created_at"]),
            window_start=Month.parse(obj["window_start"]),
            window_end=Month.parse(obj["window_end"]),
        )


@dataclasses.dataclass
class LabeledRepo:
    """A repository with its metadata, 24x20 activity matrix and (optional) stage."""

    metadata: RepoMetadata
    months: np.ndarray
    label: Stage | None = None

    def __post_init__(self) -> None:
        self.months = np.asarray(self.months, dtype=np.float64)
        if self.months.shape != (T_MONTHS, N_METRICS):
            raise ValueError(f"{self.repo_id}: months must have shape ({T_MONTHS}, {N_METRICS}), "
                             f"got {self.months.shape}")
        if self.label is not None:
            self.label = parse_stage(self.label)

    @property
    def repo_id(self) -> str:
        return self.metadata.repo_id

    def records(self) -> list[MonthlyActivityRecord]:
        return matrix_to_records(self.repo_id, self.months)

    def to_json(self) -> dict:
        return {
            "repo_id": self.repo_id,
            "metadata": self.metadata.to_json(),
            "months": [{name: float(row[j]) for j, name in enumerate(METRICS)} for row in self.months],
            "label": None if self.label is None else self.label.value,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LabeledRepo":
        months = obj["months"]
        if len(months) != T_MONTHS:
            raise ValueError(f"{obj.get('repo_id')}: expected {T_MONTHS} months, got {len(months)}")
        missing = [m for m in METRICS if m not in months[0]]
        if missing:
            raise ValueError(f"{obj.get('repo_id')}: month records missing metrics {missing}")
        mat = np.array([[float(m[name]) for name in METRICS] for m in months])
        label = obj.get("label")
        return cls(RepoMetadata.from_json(obj["metadata"]), mat, None if label is None else parse_stage(label))


def write_corpus(repos: Iterable[LabeledRepo], path: str | Path) -> None:
    """Write a corpus as newline-delimited JSON (byte-stable for identical input)."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for repo in repos:
            fh.write(json.dumps(repo.to_json(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def read_corpus(path: str | Path) -> list[LabeledRepo]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(LabeledRepo.from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed corpus record: {exc}") from exc
    return out


def iter_corpus(path: str | Path) -> Iterator[LabeledRepo]:
    yield from read_corpus(path)


def write_corpus_csv(repos: Iterable[LabeledRepo], path: str | Path) -> None:
    """Wide CSV: one row per repo-month."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["repo_id", "month_index", *METRICS, "label"])
        for repo in repos:
            label = "" if repo.label is None else repo.label.value
            for t, row in enumerate(repo.months):
                writer.writerow([repo.repo_id, t, *(repr(float(v)) for v in row), label])


def read_corpus_csv(path: str | Path) -> dict[str, tuple[np.ndarray, Stage | None]]:
    """Read the wide CSV back into ``{repo_id: (24x20 matrix, label)}``."""
    rows: dict[str, list] = {}
    labels: dict[str, Stage | None] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            rid = rec["repo_id"]
            rows.setdefault(rid, []).append((int(rec["month_index"]), [float(rec[m]) for m in METRICS]))
            labels[rid] = parse_stage(rec["label"]) if rec["label"] else None
    out = {}
    for rid, items in rows.items():
        items.sort()
        if [i for i, _ in items] != list(range(T_MONTHS)):
            raise ValueError(f"{rid}: CSV rows do not cover months 0..{T_MONTHS - 1}")
        out[rid] = (np.array([v for _, v in items]), labels[rid])
    return out
