"""Monthly aggregation of normalized forge events and metadata snapshots.

Normalized events are plain dicts with a ``type`` and an ISO-8601 ``at``
timestamp. Recognised types and their extra fields:

=====================  ==========================================================
``commit``             ``author``
``pull_request``       ``author``, ``commits``, ``changed_files``, ``closed_at``,
                       ``merged``, ``first_response_at`` (``at`` = creation time)
``issue``              ``author``, ``closed_at``, ``first_response_at``
``issue_comment``      none
``pr_review_comment``  none
``pr_comment``         none (discussion comment on a pull request)
``release``            none
=====================  ==========================================================
"""

from __future__ import annotations

import collections
import dataclasses
import datetime as dt
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from ..schema import METRIC_INDEX, N_METRICS, T_MONTHS
from .records import Month, MonthlyActivityRecord, RepoMetadata, Window, matrix_to_records

EVENT_TYPES = frozenset({
    "commit", "pull_request", "issue", "issue_comment", "pr_review_comment", "pr_comment", "release",
})
DEFAULT_BUS_FACTOR_COVERAGE = 0.5


class EventWindowError(ValueError):
    """Raised when events fall entirely outside the observation window."""


class MissingMetadataError(ValueError):
    """Raised when the forge snapshot lacks a field needed for labeling."""


def parse_time(value: str | dt.datetime | dt.date | None) -> dt.datetime | None:
    if value is None or value == "":
        return None
    if isinstance(value, dt.datetime):
        out = value
    elif isinstance(value, dt.date):
        out = dt.datetime(value.year, value.month, value.day)
    else:
        text = value.strip()
        if text.endswith("Z"):
            text = text[:-1] + "+00:00"
        out = dt.datetime.fromisoformat(text)
    if out.tzinfo is None:
        out = out.replace(tzinfo=dt.timezone.utc)
    return out


@dataclasses.dataclass(frozen=True)
class BotPolicy:
    """Suffix heuristic for automation accounts with explicit overrides."""

    suffixes: tuple[str, ...] = ("[bot]", "-bot", "_bot", "-ci")
    allow: frozenset[str] = frozenset()  # known humans that would match a suffix
    deny: frozenset[str] = frozenset()  # known bots without a telltale suffix

    def is_bot(self, login: str) -> bool:
        if login in self.allow:
            return False
        if login in self.deny:
            return True
        low = login.lower()
        return any(low.endswith(s) for s in self.suffixes)


def bus_factor(commits_by_author: Mapping[str, float], coverage: float = DEFAULT_BUS_FACTOR_COVERAGE) -> int:
    """Smallest number of authors whose commits reach ``coverage`` of the total."""
    if not 0 < coverage <= 1:
        raise ValueError(f"coverage must be in (0, 1], got {coverage}")
    counts = sorted((c for c in commits_by_author.values() if c > 0), reverse=True)
    total = sum(counts)
    if total == 0:
        return 0
    running = 0.0
    for k, c in enumerate(counts, 1):
        running += c
        if running >= coverage * total - 1e-12:
            return k
    return len(counts)


def _in_window(window: Window, when: dt.datetime | None) -> int | None:
    if when is None:
        return None
    return window.index_of(when)


def _days(a: dt.datetime, b: dt.datetime) -> float:
    return max((b - a).total_seconds() / 86400.0, 0.0)


def aggregate_monthly(
    events: Iterable[Mapping[str, Any]],
    window: Window,
    repo_id: str = "",
    *,
    prior_contributors: Iterable[str] = (),
    previous_month_contributors: Iterable[str] = (),
    bus_factor_coverage: float = DEFAULT_BUS_FACTOR_COVERAGE,
    bot_policy: BotPolicy = BotPolicy(),
) -> list[MonthlyActivityRecord]:
    """Aggregate normalized events into 24 chronological monthly records.

    ``prior_contributors`` are authors seen before the window (so they are not
    counted as new); ``previous_month_contributors`` are the authors active in
    the month preceding the window (for repeat-contributor counts at month 0).
    Empty months yield zeros; averages over empty sets are zero.
    """
    commits = [collections.Counter() for _ in range(T_MONTHS)]
    contributors = [set() for _ in range(T_MONTHS)]
    bots = [set() for _ in range(T_MONTHS)]
    m = np.zeros((T_MONTHS, N_METRICS))
    pr_commits = [[] for _ in range(T_MONTHS)]
    pr_files = [[] for _ in range(T_MONTHS)]
    pr_closed = np.zeros(T_MONTHS)
    pr_merged = np.zeros(T_MONTHS)
    durations = {k: [[] for _ in range(T_MONTHS)] for k in ("issue_dur", "issue_ttfr", "pr_dur", "pr_ttfr")}
    col = METRIC_INDEX

    for n, ev in enumerate(events):
        kind = ev.get("type")
        if kind not in EVENT_TYPES:
            raise ValueError(f"event #{n}: unknown event type {kind!r}")
        at = parse_time(ev.get("at"))
        if at is None:
            raise ValueError(f"event #{n} ({kind}): missing 'at' timestamp")
        t = _in_window(window, at)

        if kind in ("pull_request", "issue"):
            closed = parse_time(ev.get("closed_at"))
            first = parse_time(ev.get("first_response_at"))
            tc, tf = _in_window(window, closed), _in_window(window, first)
            if t is None and tc is None and tf is None:
                raise EventWindowError(
                    f"event #{n} ({kind} opened {at.isoformat()}) has no timestamp inside window "
                    f"{window.start}..{window.end}")
            author = ev.get("author")
            if kind == "issue":
                if t is not None:
                    m[t, col["issues_count"]] += 1
                if tc is not None:
                    durations["issue_dur"][tc].append(_days(at, closed))
                if tf is not None:
                    durations["issue_ttfr"][tf].append(_days(at, first))
            else:
                if t is not None:
                    m[t, col["pull_requests"]] += 1
                    pr_commits[t].append(float(ev.get("commits", 0) or 0))
                    pr_files[t].append(float(ev.get("changed_files", 0) or 0))
                    if author:
                        contributors[t].add(author)
                        if bot_policy.is_bot(author):
                            bots[t].add(author)
                if tc is not None:
                    durations["pr_dur"][tc].append(_days(at, closed))
                    pr_closed[tc] += 1
                    pr_merged[tc] += bool(ev.get("merged", False))
                if tf is not None:
                    durations["pr_ttfr"][tf].append(_days(at, first))
            continue

        if t is None:
            raise EventWindowError(
                f"event #{n} ({kind} at {at.isoformat()}) lies outside window {window.start}..{window.end}")
        if kind == "commit":
            author = ev.get("author") or "<unknown>"
            commits[t][author] += 1
            contributors[t].add(author)
            if bot_policy.is_bot(author):
                bots[t].add(author)
        elif kind == "issue_comment":
            m[t, col["issue_comments"]] += 1
        elif kind == "pr_review_comment":
            m[t, col["pr_review_comments"]] += 1
            m[t, col["pr_total_comments"]] += 1
        elif kind == "pr_comment":
            m[t, col["pr_total_comments"]] += 1
        elif kind == "release":
            m[t, col["releases"]] += 1

    seen = set(prior_contributors)
    previous = set(previous_month_contributors)
    for t in range(T_MONTHS):
        m[t, col["commit_count"]] = sum(commits[t].values())
        m[t, col["committer_count"]] = len(commits[t])
        m[t, col["bus_factor"]] = bus_factor(commits[t], bus_factor_coverage)
        m[t, col["bot_contributors"]] = len(bots[t])
        m[t, col["new_contributors"]] = len(contributors[t] - seen)
        m[t, col["repeat_contributors"]] = len(contributors[t] & previous)
        seen |= contributors[t]
        previous = contributors[t]
        if pr_commits[t]:
            m[t, col["pr_avg_commits"]] = float(np.mean(pr_commits[t]))
            m[t, col["pr_avg_files"]] = float(np.mean(pr_files[t]))
            m[t, col["pr_total_files"]] = float(np.sum(pr_files[t]))
        if pr_closed[t]:
            m[t, col["pr_acceptance_rate"]] = pr_merged[t] / pr_closed[t]
        for key, metric in (("issue_dur", "issue_duration_days"), ("issue_ttfr", "issue_ttfr_days"),
                            ("pr_dur", "pr_review_duration_days"), ("pr_ttfr", "pr_ttfr_days")):
            vals = durations[key][t]
            if vals:
                m[t, col[metric]] = float(np.mean(vals))
    return matrix_to_records(repo_id, m)


def snapshot_metadata(
    events: Iterable[Mapping[str, Any]],
    forge_metadata: Mapping[str, Any],
    window: Window,
    repo_id: str | None = None,
) -> RepoMetadata:
    """Build the labeling snapshot.

    ``unique_contributors_total`` is the number of distinct authors over the
    whole history: the forge's contributor list (``contributors``) united with
    every commit/pull-request author in ``events``. ``stargazers`` is read
    from ``stargazers_count`` (or ``stargazers``) as of the window end.
    """
    stars = forge_metadata.get("stargazers_count", forge_metadata.get("stargazers"))
    if stars is None:
        raise MissingMetadataError("forge metadata has no stargazer count; stage cannot be labeled")
    created = parse_time(forge_metadata.get("created_at"))
    if created is None:
        raise MissingMetadataError("forge metadata has no creation date")
    authors = set(forge_metadata.get("contributors", ()))
    for ev in events:
        if ev.get("type") in ("commit", "pull_request") and ev.get("author"):
            authors.add(ev["author"])
    rid = repo_id or forge_metadata.get("full_name") or forge_metadata.get("repo_id") or ""
    return RepoMetadata(
        repo_id=rid,
        unique_contributors_total=len(authors),
        stargazers=int(stars),
        created_at=created.date(),
        window_start=window.start,
        window_end=window.end,
    )


def monthly_contributor_sets(events: Sequence[Mapping[str, Any]], window: Window) -> list[set[str]]:
    """Distinct commit authors per window month (helper for consistency checks)."""
    out = [set() for _ in range(T_MONTHS)]
    for ev in events:
        if ev.get("type") == "commit":
            t = window.index_of(parse_time(ev["at"]))
            if t is not None:
                out[t].add(ev.get("author") or "<unknown>")
    return out


__all__ = [
    "BotPolicy", "EventWindowError", "MissingMetadataError", "aggregate_monthly", "bus_factor",
    "parse_time", "snapshot_metadata", "Month",
]
