"""Labeled synthetic corpora for desk-scale experiments.

Each repository gets metadata that satisfies the labeling rule for its stage
with a configurable margin, then 24 months of activity drawn from
stage-conditioned processes. Per-repository random effects are shared
within each metric category, so every category acts as a separate noisy
view of the stage; the views are graded from strong (contribution activity)
to weak (releases), which gives attribution experiments a known ordering.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import math
from typing import Mapping

import numpy as np

from ..schema import METRIC_CATEGORY, METRIC_INDEX, METRICS, N_METRICS, T_MONTHS, Category, Stage, parse_stage
from .labels import CONTRIB_MID_MAX, FEDERATION_MIN_RATIO_EXCLUSIVE, FEDERATION_MIN_STARS_EXCLUSIVE, \
    TOY_MAX_EXCLUSIVE, label_stage
from .records import LabeledRepo, Month, RepoMetadata, Window

# Monthly mean per metric for (toy, contribMid, club, federation).
_STAGE_COLUMNS = (Stage.TOY, Stage.CONTRIB_MID, Stage.CLUB, Stage.FEDERATION)
BASE_RATES: dict[str, tuple[float, float, float, float]] = {
    "commit_count": (6.0, 40.0, 110.0, 170.0),
    "committer_count": (1.2, 5.0, 16.0, 24.0),
    "pull_requests": (0.5, 8.0, 26.0, 48.0),
    "pr_avg_commits": (1.5, 2.5, 3.6, 2.8),
    "pr_avg_files": (2.0, 4.0, 7.5, 5.5),
    "pr_total_files": (0.0, 0.0, 0.0, 0.0),  # derived from pull_requests * pr_avg_files
    "bot_contributors": (0.05, 0.6, 1.2, 2.4),
    "new_contributors": (0.2, 1.5, 3.5, 9.0),
    "repeat_contributors": (0.6, 3.0, 12.0, 14.0),
    "bus_factor": (1.0, 1.8, 5.0, 3.5),
    "issues_count": (0.6, 6.0, 18.0, 45.0),
    "issue_comments": (1.0, 15.0, 55.0, 150.0),
    "issue_duration_days": (40.0, 20.0, 16.0, 10.0),
    "issue_ttfr_days": (20.0, 6.0, 3.5, 1.5),
    "pr_review_comments": (0.2, 6.0, 42.0, 40.0),
    "pr_review_duration_days": (10.0, 5.0, 4.5, 3.2),
    "pr_total_comments": (0.5, 15.0, 80.0, 95.0),
    "pr_ttfr_days": (8.0, 2.5, 1.6, 1.1),
    "pr_acceptance_rate": (0.8, 0.75, 0.66, 0.6),
    "releases": (0.05, 0.4, 1.0, 1.2),
}
# Position of each stage on the latent activity axis; metric log-rates are interpolated
# between the BASE_RATES columns placed at 0, 1, 2, 3. Federation sits only a short way
# past club: the two regimes differ mainly in visibility, which activity only partly shows.
FEDERATION_OFFSET = 0.3
STAGE_POSITION = {Stage.TOY: 0.0, Stage.CONTRIB_MID: 1.0, Stage.CLUB: 2.0, Stage.FEDERATION: 2.0 + FEDERATION_OFFSET}
# Relative change of the mean across the window (end vs start).
STAGE_TREND = {Stage.TOY: -0.5, Stage.CONTRIB_MID: 0.0, Stage.CLUB: 0.05, Stage.FEDERATION: 0.35}
# Per-category spread of the latent position (multiplied by noise_level). Each category reads
# the stage through its own independent draw, from sharp (contribution) to blurred (releases).
VIEW_NOISE = {
    Category.CONTRIBUTION: 0.5,
    Category.ISSUE: 0.9,
    Category.COMMUNITY: 1.2,
    Category.PR_QA: 1.8,
    Category.RELEASE: 3.0,
}
# Typical project age in years at the window end, per stage.
STAGE_AGE_YEARS = {Stage.TOY: 1.5, Stage.CONTRIB_MID: 2.8, Stage.CLUB: 5.2, Stage.FEDERATION: 6.3}

COUNT_DISPERSION = 5.0
DURATION_SHAPE = 2.0
CONTRIBUTOR_CAP = 2000

# The imbalance of the reference corpus: contribMid 60%, toy 27%, club 9%, federation 4%.
REFERENCE_MIX = {Stage.CONTRIB_MID: 0.60, Stage.TOY: 0.27, Stage.CLUB: 0.09, Stage.FEDERATION: 0.04}

_DURATION_METRICS = {
    "issue_duration_days": "issues_count",
    "issue_ttfr_days": "issues_count",
    "pr_review_duration_days": "pull_requests",
    "pr_ttfr_days": "pull_requests",
}
_PR_AVERAGES = ("pr_avg_commits", "pr_avg_files")


class SynthesisConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class SynthesisConfig:
    n_repos: Mapping[Stage, int]
    noise_level: float = 0.3
    boundary_margin: float = 0.1
    seed: int = 0
    window_end: Month = Month(2024, 6)

    def __post_init__(self) -> None:
        counts = {parse_stage(k): int(v) for k, v in dict(self.n_repos).items()}
        object.__setattr__(self, "n_repos", counts)
        if any(v < 0 for v in counts.values()):
            raise SynthesisConfigError("per-stage repository counts must be >= 0")
        if not 0.0 <= self.noise_level <= 1.0:
            raise SynthesisConfigError(f"noise_level must be in [0, 1], got {self.noise_level}")
        if not self.boundary_margin > 0:
            raise SynthesisConfigError(f"boundary_margin must be > 0, got {self.boundary_margin}")
        _bounds(self.boundary_margin)  # feasibility

    @classmethod
    def from_mix(cls, total: int, mix: Mapping[Stage, float] = REFERENCE_MIX, **kw) -> "SynthesisConfig":
        return cls(n_repos=mix_counts(total, mix), **kw)


def mix_counts(total: int, mix: Mapping[Stage, float]) -> dict[Stage, int]:
    """Largest-remainder split of ``total`` repos across stages."""
    weights = {parse_stage(k): float(v) for k, v in mix.items()}
    norm = sum(weights.values())
    ideal = {k: total * v / norm for k, v in weights.items()}
    out = {k: int(math.floor(v)) for k, v in ideal.items()}
    rest = total - sum(out.values())
    for k in sorted(ideal, key=lambda k: (-(ideal[k] - out[k]), k.value))[:rest]:
        out[k] += 1
    return out


def _bounds(margin: float) -> dict[str, float]:
    f = 1.0 + margin
    toy_max = math.ceil(TOY_MAX_EXCLUSIVE / f) - 1
    mid_lo = math.ceil(TOY_MAX_EXCLUSIVE * f)
    mid_hi = math.floor(CONTRIB_MID_MAX / f)
    big_lo = math.floor(CONTRIB_MID_MAX * f) + 1
    if toy_max < 1:
        raise SynthesisConfigError(f"boundary_margin={margin} leaves no toy contributor count >= 1")
    if mid_lo > mid_hi:
        raise SynthesisConfigError(
            f"boundary_margin={margin} pushes contribMid bounds past [{TOY_MAX_EXCLUSIVE}, {CONTRIB_MID_MAX}]")
    if big_lo > CONTRIBUTOR_CAP // 2:
        raise SynthesisConfigError(f"boundary_margin={margin} is too large for large-community stages")
    return {
        "toy_max": toy_max, "mid_lo": mid_lo, "mid_hi": mid_hi, "big_lo": big_lo,
        "fed_stars_min": math.floor(FEDERATION_MIN_STARS_EXCLUSIVE * f) + 1,
        "fed_ratio_min": FEDERATION_MIN_RATIO_EXCLUSIVE * f,
        "club_ratio_max": FEDERATION_MIN_RATIO_EXCLUSIVE / f,
    }


def _log_uniform_int(rng: np.random.Generator, lo: int, hi: int) -> int:
    return int(min(hi, max(lo, math.floor(math.exp(rng.uniform(math.log(lo), math.log(hi + 1)))))))


def sample_metadata(rng: np.random.Generator, stage: Stage, repo_id: str, window: Window,
                    margin: float) -> RepoMetadata:
    b = _bounds(margin)
    if stage is Stage.TOY:
        contributors = int(rng.integers(1, b["toy_max"] + 1))
        stars = int(min(99, math.floor(rng.lognormal(2.0, 1.2))))
    elif stage is Stage.CONTRIB_MID:
        contributors = _log_uniform_int(rng, b["mid_lo"], b["mid_hi"])
        stars = int(math.floor(contributors * rng.lognormal(2.0, 1.5)))
    else:
        contributors = _log_uniform_int(rng, b["big_lo"], 600)
        if stage is Stage.FEDERATION:
            ratio = math.exp(rng.uniform(math.log(b["fed_ratio_min"]), math.log(60.0)))
            stars = max(math.ceil(contributors * ratio) + 1, b["fed_stars_min"])
        else:
            ratio = math.exp(rng.uniform(math.log(0.05), math.log(b["club_ratio_max"])))
            stars = int(math.floor(contributors * ratio))
    age_days = 730 + int(365.25 * rng.gamma(4.0, max(STAGE_AGE_YEARS[stage] - 1.0, 0.25) / 4.0))
    window_end_day = window.end.shift(1).first_day()
    meta = RepoMetadata(
        repo_id=repo_id,
        unique_contributors_total=contributors,
        stargazers=stars,
        created_at=window_end_day - dt.timedelta(days=age_days),
        window_start=window.start,
        window_end=window.end,
    )
    assert label_stage(meta) is stage, (stage, meta)
    return meta


def _nb(rng: np.random.Generator, mean: np.ndarray) -> np.ndarray:
    mean = np.maximum(mean, 0.0)
    p = COUNT_DISPERSION / (COUNT_DISPERSION + mean)
    return rng.negative_binomial(COUNT_DISPERSION, p).astype(np.float64)


def _stage_position(stage: Stage) -> float:
    return 2.0 + FEDERATION_OFFSET if stage is Stage.FEDERATION else STAGE_POSITION[stage]


def _rate_at(metric: str, u: float) -> float:
    """Monthly mean of ``metric`` at latent position ``u`` (log-linear between columns, extrapolated)."""
    col = np.asarray(BASE_RATES[metric])
    if not (col > 0).all():
        return 0.0
    vals = col if metric == "pr_acceptance_rate" else np.log(col)
    k = int(np.clip(np.floor(u), 0, len(col) - 2))
    v = vals[k] + (u - k) * (vals[k + 1] - vals[k])
    return float(v if metric == "pr_acceptance_rate" else np.exp(v))


def sample_trajectory(rng: np.random.Generator, stage: Stage, meta: RepoMetadata, noise: float) -> np.ndarray:
    """Draw a (24, 20) activity matrix for one repository."""
    pos = {c: _stage_position(stage) + rng.normal(0.0, noise * VIEW_NOISE[c]) for c in VIEW_NOISE}
    u = np.array([pos[METRIC_CATEGORY[m]] for m in METRICS])
    base = np.array([_rate_at(m, u[j]) for j, m in enumerate(METRICS)])
    slope = STAGE_TREND[stage] + rng.normal(0.0, 0.15)
    t = np.arange(T_MONTHS) / (T_MONTHS - 1) - 0.5
    trend = np.maximum(1.0 + slope * t, 0.05)
    month_noise = np.exp(noise * rng.standard_normal((T_MONTHS, N_METRICS)) - 0.5 * noise ** 2)
    rates = base[None, :] * trend[:, None] * month_noise

    out = np.zeros((T_MONTHS, N_METRICS))
    idx = METRIC_INDEX
    count_metrics = ("commit_count", "pull_requests", "bot_contributors", "new_contributors",
                     "repeat_contributors", "issues_count", "issue_comments", "pr_review_comments",
                     "pr_total_comments", "releases", "committer_count", "bus_factor")
    for name in count_metrics:
        out[:, idx[name]] = _nb(rng, rates[:, idx[name]])

    commits = out[:, idx["commit_count"]]
    cap = float(meta.unique_contributors_total)
    committers = np.minimum(np.maximum(out[:, idx["committer_count"]], 1.0), cap)
    committers = np.where(commits > 0, np.minimum(committers, commits), 0.0)
    out[:, idx["committer_count"]] = committers
    out[:, idx["bus_factor"]] = np.where(committers > 0, np.clip(out[:, idx["bus_factor"]], 1.0, committers), 0.0)
    out[:, idx["repeat_contributors"]] = np.minimum(out[:, idx["repeat_contributors"]], committers)
    out[:, idx["bot_contributors"]] = np.minimum(out[:, idx["bot_contributors"]], committers)
    out[:, idx["new_contributors"]] = np.minimum(out[:, idx["new_contributors"]], cap)
    out[:, idx["pr_total_comments"]] = np.maximum(out[:, idx["pr_total_comments"]], out[:, idx["pr_review_comments"]])

    prs = out[:, idx["pull_requests"]]
    for name in _PR_AVERAGES:
        mean = rates[:, idx[name]]
        draw = 1.0 + rng.gamma(DURATION_SHAPE, np.maximum(mean - 1.0, 0.05) / DURATION_SHAPE)
        out[:, idx[name]] = np.where(prs > 0, draw, 0.0)
    out[:, idx["pr_total_files"]] = np.round(prs * out[:, idx["pr_avg_files"]])

    for name, driver in _DURATION_METRICS.items():
        mean = rates[:, idx[name]]
        draw = rng.gamma(DURATION_SHAPE, mean / DURATION_SHAPE)
        out[:, idx[name]] = np.where(out[:, idx[driver]] > 0, draw, 0.0)

    acc_mean = float(np.clip(base[idx["pr_acceptance_rate"]], 0.05, 0.95))
    conc = 30.0 / (1.0 + 8.0 * noise)
    acc = rng.beta(acc_mean * conc, (1.0 - acc_mean) * conc, size=T_MONTHS)
    out[:, idx["pr_acceptance_rate"]] = np.where(prs > 0, acc, 0.0)
    return out


def generate_synthetic_corpus(cfg: SynthesisConfig) -> list[LabeledRepo]:
    """Generate a labeled corpus; identical configs give identical corpora."""
    rng = np.random.default_rng(cfg.seed)
    window = Window.ending(cfg.window_end)
    stages = [s for s in _STAGE_COLUMNS for _ in range(cfg.n_repos.get(s, 0))]
    order = rng.permutation(len(stages))
    out = []
    for i, k in enumerate(order):
        stage = stages[k]
        repo_id = f"synth/repo-{i:05d}"
        meta = sample_metadata(rng, stage, repo_id, window, cfg.boundary_margin)
        months = sample_trajectory(rng, stage, meta, cfg.noise_level)
        out.append(LabeledRepo(meta, months, stage))
    return out


def scramble_metrics(repos: list[LabeledRepo], metrics: tuple[str, ...], seed: int) -> list[LabeledRepo]:
    """Replace the given metrics by label-independent noise.

    Each metric's values are pooled over all repository-months and redrawn
    by shuffling, which keeps the marginal distribution but destroys any
    association with the stage.
    """
    rng = np.random.default_rng(seed)
    stacked = np.stack([r.months for r in repos])
    for name in metrics:
        j = METRIC_INDEX[name]
        flat = stacked[:, :, j].ravel()
        stacked[:, :, j] = rng.permutation(flat).reshape(stacked.shape[:2])
    return [LabeledRepo(r.metadata, stacked[i], r.label) for i, r in enumerate(repos)]
