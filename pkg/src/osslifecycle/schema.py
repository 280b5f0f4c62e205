"""Shared vocabulary: metric names, lifecycle stages and feature categories."""

from __future__ import annotations

import enum

T_MONTHS = 24

METRICS: tuple[str, ...] = (
    "commit_count",
    "committer_count",
    "pull_requests",
    "pr_avg_commits",
    "pr_avg_files",
    "pr_total_files",
    "bot_contributors",
    "new_contributors",
    "repeat_contributors",
    "bus_factor",
    "issues_count",
    "issue_comments",
    "issue_duration_days",
    "issue_ttfr_days",
    "pr_review_comments",
    "pr_review_duration_days",
    "pr_total_comments",
    "pr_ttfr_days",
    "pr_acceptance_rate",
    "releases",
)
N_METRICS = len(METRICS)
METRIC_INDEX = {name: i for i, name in enumerate(METRICS)}


class Stage(str, enum.Enum):
    """Lifecycle stage. ``stadium`` is deliberately not modelled."""

    TOY = "toy"
    CONTRIB_MID = "contribMid"
    CLUB = "club"
    FEDERATION = "federation"

    def __str__(self) -> str:
        return self.value


# Reporting order for confusion matrices and per-class tables.
STAGE_ORDER: tuple[Stage, ...] = (Stage.CLUB, Stage.CONTRIB_MID, Stage.FEDERATION, Stage.TOY)
# Class order of the three-way Stage-2 heads.
STAGE2_CLASSES: tuple[Stage, ...] = (Stage.CLUB, Stage.FEDERATION, Stage.TOY)


def parse_stage(value: str | Stage) -> Stage:
    if isinstance(value, Stage):
        return value
    try:
        return Stage(value)
    except ValueError:
        raise ValueError(f"unknown stage label {value!r}; expected one of "
                         f"{[s.value for s in Stage]}") from None


class Category(str, enum.Enum):
    CONTRIBUTION = "Contribution Activity"
    ISSUE = "Issue & Maintenance Responsiveness"
    COMMUNITY = "Community Dynamics"
    PR_QA = "Pull Request Quality Assurance"
    RELEASE = "Release & Evolution Metrics"

    def __str__(self) -> str:
        return self.value


CATEGORY_ORDER: tuple[Category, ...] = (
    Category.CONTRIBUTION,
    Category.ISSUE,
    Category.COMMUNITY,
    Category.PR_QA,
    Category.RELEASE,
)

METRIC_CATEGORY: dict[str, Category] = {
    "commit_count": Category.CONTRIBUTION,
    "committer_count": Category.CONTRIBUTION,
    "pull_requests": Category.CONTRIBUTION,
    "pr_avg_commits": Category.CONTRIBUTION,
    "pr_avg_files": Category.CONTRIBUTION,
    "pr_total_files": Category.CONTRIBUTION,
    "bot_contributors": Category.CONTRIBUTION,
    "new_contributors": Category.COMMUNITY,
    "repeat_contributors": Category.COMMUNITY,
    "bus_factor": Category.COMMUNITY,
    "issues_count": Category.ISSUE,
    "issue_comments": Category.ISSUE,
    "issue_duration_days": Category.ISSUE,
    "issue_ttfr_days": Category.ISSUE,
    "pr_review_comments": Category.PR_QA,
    "pr_review_duration_days": Category.PR_QA,
    "pr_total_comments": Category.PR_QA,
    "pr_ttfr_days": Category.PR_QA,
    "pr_acceptance_rate": Category.PR_QA,
    "releases": Category.RELEASE,
}
