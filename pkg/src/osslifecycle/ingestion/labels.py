"""Rule-based lifecycle stage assignment."""

from __future__ import annotations

import dataclasses

from ..schema import Stage
from .records import RepoMetadata

TOY_MAX_EXCLUSIVE = 6
CONTRIB_MID_MAX = 75
FEDERATION_MIN_STARS_EXCLUSIVE = 1000
FEDERATION_MIN_RATIO_EXCLUSIVE = 2.0


@dataclasses.dataclass(frozen=True)
class LabelThresholds:
    toy_below: int = TOY_MAX_EXCLUSIVE
    contrib_mid_max: int = CONTRIB_MID_MAX
    federation_stars_above: int = FEDERATION_MIN_STARS_EXCLUSIVE
    federation_ratio_above: float = FEDERATION_MIN_RATIO_EXCLUSIVE


DEFAULT_LABEL_THRESHOLDS = LabelThresholds()


def label_counts(contributors: int, stargazers: int,
                 thresholds: LabelThresholds = DEFAULT_LABEL_THRESHOLDS) -> Stage:
    """Ordered rule on raw counts.

    Contributor count decides first; the star clauses only split the
    large-community branch into federation and club.
    """
    if contributors < 0 or stargazers < 0:
        raise ValueError(f"counts must be non-negative (contributors={contributors}, stargazers={stargazers})")
    if contributors < thresholds.toy_below:
        return Stage.TOY
    if contributors <= thresholds.contrib_mid_max:
        return Stage.CONTRIB_MID
    ratio = stargazers / contributors
    if stargazers > thresholds.federation_stars_above and ratio > thresholds.federation_ratio_above:
        return Stage.FEDERATION
    return Stage.CLUB


def label_stage(meta: RepoMetadata, thresholds: LabelThresholds = DEFAULT_LABEL_THRESHOLDS) -> Stage:
    return label_counts(meta.unique_contributors_total, meta.stargazers, thresholds)
