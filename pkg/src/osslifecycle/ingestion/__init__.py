"""Repository activity acquisition, labeling and synthetic corpora."""

from __future__ import annotations

from pathlib import Path

from .aggregate import BotPolicy, EventWindowError, MissingMetadataError, aggregate_monthly, bus_factor, \
    snapshot_metadata
from .forge import ForgeClient, ForgeError, ForgeNetworkError, InsufficientHistory, RepositoryNotFound, \
    TokenBucket, fetch_repo_activity, normalize_events
from .labels import LabelThresholds, label_counts, label_stage
from .records import LabeledRepo, Month, MonthlyActivityRecord, RepoMetadata, Window, matrix_to_records, \
    read_corpus, read_corpus_csv, records_to_matrix, write_corpus, write_corpus_csv
from .synthetic import REFERENCE_MIX, SynthesisConfig, SynthesisConfigError, generate_synthetic_corpus, \
    mix_counts, scramble_metrics


def ingest_repo(repo_id: str, window: Window, cache_dir: str | Path, *, credentials: str | None = None,
                client: ForgeClient | None = None, bus_factor_coverage: float = 0.5,
                bot_policy: BotPolicy = BotPolicy()) -> LabeledRepo:
    """Fetch, aggregate and label one repository."""
    pages = fetch_repo_activity(repo_id, window, credentials, cache_dir, client=client)
    norm = normalize_events(pages, window)
    records = aggregate_monthly(
        norm["events"], window, repo_id,
        prior_contributors=norm["prior_contributors"],
        previous_month_contributors=norm["previous_month_contributors"],
        bus_factor_coverage=bus_factor_coverage, bot_policy=bot_policy,
    )
    meta = snapshot_metadata(norm["events"], norm["forge_metadata"], window, repo_id)
    return LabeledRepo(meta, records_to_matrix(records), label_stage(meta))


__all__ = [
    "BotPolicy", "EventWindowError", "ForgeClient", "ForgeError", "ForgeNetworkError", "InsufficientHistory",
    "LabelThresholds", "LabeledRepo", "MissingMetadataError", "Month", "MonthlyActivityRecord", "REFERENCE_MIX",
    "RepoMetadata", "RepositoryNotFound", "SynthesisConfig", "SynthesisConfigError", "TokenBucket", "Window",
    "aggregate_monthly", "bus_factor", "fetch_repo_activity", "generate_synthetic_corpus", "ingest_repo",
    "label_counts", "label_stage", "matrix_to_records", "mix_counts", "normalize_events", "read_corpus",
    "read_corpus_csv", "records_to_matrix", "scramble_metrics", "snapshot_metadata", "write_corpus",
    "write_corpus_csv",
]
