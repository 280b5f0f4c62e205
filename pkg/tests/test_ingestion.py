import datetime as dt
import json

import httpx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from osslifecycle.ingestion import (
    EventWindowError, ForgeClient, ForgeNetworkError, InsufficientHistory, LabeledRepo, MissingMetadataError,
    Month, RepoMetadata, RepositoryNotFound, SynthesisConfig, SynthesisConfigError, Window, aggregate_monthly,
    bus_factor, fetch_repo_activity, generate_synthetic_corpus, label_counts, label_stage, normalize_events,
    read_corpus, read_corpus_csv, records_to_matrix, scramble_metrics, snapshot_metadata, write_corpus,
    write_corpus_csv,
)
from osslifecycle.schema import METRICS, Stage, T_MONTHS

WINDOW = Window.ending(Month(2024, 6))


@pytest.mark.parametrize("contributors,stars,expected", [
    (100, 1500, Stage.FEDERATION),
    (100, 150, Stage.CLUB),
    (30, 500, Stage.CONTRIB_MID),
    (3, 50, Stage.TOY),
    (80, 900, Stage.CLUB),
    (5, 100_000, Stage.TOY),
    (6, 0, Stage.CONTRIB_MID),
    (75, 0, Stage.CONTRIB_MID),
    (76, 1001, Stage.FEDERATION),
    (600, 1001, Stage.CLUB),  # ratio below 2
    (100, 1000, Stage.CLUB),  # stars must exceed 1000
])
def test_label_rule(contributors, stars, expected):
    assert label_counts(contributors, stars) is expected


def test_label_rejects_negative():
    with pytest.raises(ValueError):
        label_counts(-1, 10)


@given(st.integers(0, 10_000), st.integers(0, 10_000_000))
def test_label_total(c, s):
    assert label_counts(c, s) in set(Stage)


def test_bus_factor_cases():
    assert bus_factor({"a": 6, "b": 3, "c": 1}) == 1
    assert bus_factor({"a": 4, "b": 4, "c": 2}) == 2
    assert bus_factor({}) == 0
    assert bus_factor({"a": 5, "b": 5}, coverage=0.8) == 2


def _commit(at, author):
    return {"type": "commit", "at": at, "author": author}


def test_aggregate_empty_and_counts():
    events = [_commit(f"2022-08-{d:02d}T12:00:00Z", a) for d, a in
              zip(range(1, 11), ["a"] * 6 + ["b"] * 3 + ["c"])]
    recs = aggregate_monthly(events, WINDOW, "x/y")
    assert len(recs) == T_MONTHS
    assert [r.month_index for r in recs] == list(range(24))
    m = records_to_matrix(recs)
    assert not m[0].any()  # 2022-07 is empty
    aug = recs[1]
    assert aug.commit_count == 10 and aug.committer_count == 3 and aug.bus_factor == 1
    assert not m[2:].any()


def test_aggregate_rejects_outside_window():
    with pytest.raises(EventWindowError):
        aggregate_monthly([_commit("2021-01-05T00:00:00Z", "a")], WINDOW)


def test_aggregate_pr_metrics():
    pr = {"type": "pull_request", "at": "2023-01-02T00:00:00Z", "author": "dev", "commits": 3,
          "changed_files": 4, "closed_at": "2023-01-04T00:00:00Z", "merged": True,
          "first_response_at": "2023-01-03T00:00:00Z"}
    pr2 = dict(pr, commits=1, changed_files=2, merged=False)
    m = records_to_matrix(aggregate_monthly([pr, pr2], WINDOW))
    t = 6  # 2023-01
    row = dict(zip(METRICS, m[t]))
    assert row["pull_requests"] == 2
    assert row["pr_avg_commits"] == 2.0 and row["pr_total_files"] == 6
    assert row["pr_acceptance_rate"] == 0.5
    assert row["pr_review_duration_days"] == pytest.approx(2.0)
    assert row["pr_ttfr_days"] == pytest.approx(1.0)


def test_snapshot_metadata_cumulative():
    events = [_commit("2023-01-01T00:00:00Z", a) for a in "abac"]
    meta = snapshot_metadata(events, {"stargazers_count": 10, "created_at": "2019-01-01T00:00:00Z"}, WINDOW, "r")
    assert meta.unique_contributors_total == 3
    # history total exceeds any monthly count
    hist = {"stargazers_count": 4, "created_at": "2019-01-01", "contributors": [f"u{i}" for i in range(9)]}
    events = [_commit(f"2023-{m:02d}-01T00:00:00Z", f"u{m % 5}") for m in range(1, 12)]
    meta = snapshot_metadata(events, hist, WINDOW, "r")
    assert meta.unique_contributors_total == 9
    assert max(records_to_matrix(aggregate_monthly(events, WINDOW))[:, 1]) <= 5


def test_snapshot_requires_stars():
    with pytest.raises(MissingMetadataError):
        snapshot_metadata([], {"created_at": "2019-01-01"}, WINDOW)


def test_metadata_window_must_span_24_months():
    with pytest.raises(ValueError):
        RepoMetadata("r", 3, 1, dt.date(2020, 1, 1), Month(2023, 1), Month(2024, 6))


def test_synthetic_determinism(tmp_path):
    cfg = SynthesisConfig({s: 10 for s in Stage}, noise_level=0.0, seed=7)
    a, b = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
    write_corpus(generate_synthetic_corpus(cfg), a)
    write_corpus(generate_synthetic_corpus(cfg), b)
    assert a.read_bytes() == b.read_bytes()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0), st.floats(0.05, 0.5))
def test_generator_sound(seed, noise, margin):
    repos = generate_synthetic_corpus(SynthesisConfig({s: 3 for s in Stage}, noise, margin, seed))
    assert len(repos) == 12
    for r in repos:
        assert label_stage(r.metadata) is r.label
        assert (r.months >= 0).all()
        acc = r.months[:, METRICS.index("pr_acceptance_rate")]
        assert ((acc >= 0) & (acc <= 1)).all()
        assert r.metadata.unique_contributors_total >= r.months[:, METRICS.index("committer_count")].max()


def test_noise_raises_variance():
    def spread(noise):
        repos = generate_synthetic_corpus(SynthesisConfig({Stage.CONTRIB_MID: 150}, noise_level=noise, seed=3))
        # sample variance of every repo-month value, per metric
        return np.stack([r.months for r in repos]).reshape(-1, len(METRICS)).var(axis=0, ddof=1)

    lo, hi = spread(0.1), spread(0.8)
    assert (hi > lo).all()


def test_infeasible_margin():
    with pytest.raises(SynthesisConfigError):
        SynthesisConfig({Stage.CONTRIB_MID: 1}, boundary_margin=5.0)
    with pytest.raises(SynthesisConfigError):
        SynthesisConfig({Stage.TOY: -1})
    with pytest.raises(SynthesisConfigError):
        SynthesisConfig({Stage.TOY: 1}, noise_level=1.5)


def test_corpus_roundtrip(tmp_path, small_corpus):
    p = tmp_path / "c.ndjson"
    write_corpus(small_corpus, p)
    back = read_corpus(p)
    assert [r.repo_id for r in back] == [r.repo_id for r in small_corpus]
    for a, b in zip(back, small_corpus):
        np.testing.assert_array_equal(a.months, b.months)
        assert a.label is b.label and a.metadata == b.metadata
    obj = json.loads(p.read_text().splitlines()[0])
    assert set(obj) == {"repo_id", "metadata", "months", "label"}
    assert len(obj["months"]) == 24 and set(METRICS) <= set(obj["months"][0])
    csv_path = tmp_path / "c.csv"
    write_corpus_csv(small_corpus[:3], csv_path)
    wide = read_corpus_csv(csv_path)
    for r in small_corpus[:3]:
        np.testing.assert_allclose(wide[r.repo_id][0], r.months)
        assert wide[r.repo_id][1] is r.label


def test_scramble_keeps_marginal_and_breaks_association(small_corpus):
    j = METRICS.index("releases")
    out = scramble_metrics(small_corpus, ("releases",), seed=1)
    before = np.sort(np.concatenate([r.months[:, j] for r in small_corpus]))
    after = np.sort(np.concatenate([r.months[:, j] for r in out]))
    np.testing.assert_array_equal(before, after)
    other = METRICS.index("commit_count")
    for a, b in zip(small_corpus, out):
        np.testing.assert_array_equal(a.months[:, other], b.months[:, other])
        assert a.label is b.label


# --- forge client against a fake API ---------------------------------------------

def _fake_forge(created="2015-01-01T00:00:00Z", missing=False, calls=None):
    def handler(request: httpx.Request) -> httpx.Response:
        if calls is not None:
            calls.append(str(request.url))
        path = request.url.path
        if missing:
            return httpx.Response(404, json={"message": "Not Found"})
        if path == "/repos/o/r":
            return httpx.Response(200, json={"full_name": "o/r", "created_at": created, "stargazers_count": 1500})
        if path == "/repos/o/r/commits":
            return httpx.Response(200, json=[{"sha": "1", "author": {"login": "alice"},
                                              "commit": {"author": {"date": "2023-03-05T10:00:00Z"}}}])
        if path == "/repos/o/r/contributors":
            return httpx.Response(200, json=[{"login": f"u{i}"} for i in range(80)])
        return httpx.Response(200, json=[])
    return httpx.MockTransport(handler)


def test_fetch_caches_and_serves_from_disk(tmp_path):
    calls = []
    client = ForgeClient("https://forge.test", transport=_fake_forge(calls=calls), sleep=lambda s: None)
    pages = fetch_repo_activity("o/r", WINDOW, cache_dir=tmp_path, client=client)
    n = len(calls)
    assert n > 0
    files = list(tmp_path.rglob("*.json"))
    first = files[0].read_bytes()
    again = fetch_repo_activity("o/r", WINDOW, cache_dir=tmp_path, client=client)
    assert len(calls) == n  # no network on a cache hit
    assert again == pages and files[0].read_bytes() == first
    norm = normalize_events(pages, WINDOW)
    recs = aggregate_monthly(norm["events"], WINDOW, "o/r", prior_contributors=norm["prior_contributors"],
                             previous_month_contributors=norm["previous_month_contributors"])
    meta = snapshot_metadata(norm["events"], norm["forge_metadata"], WINDOW, "o/r")
    assert records_to_matrix(recs)[8, 0] == 1  # 2023-03 commit
    assert label_stage(meta) is Stage.FEDERATION


def test_fetch_not_found(tmp_path):
    client = ForgeClient("https://forge.test", transport=_fake_forge(missing=True), sleep=lambda s: None)
    with pytest.raises(RepositoryNotFound):
        fetch_repo_activity("o/r", WINDOW, cache_dir=tmp_path, client=client)


def test_fetch_insufficient_history(tmp_path):
    client = ForgeClient("https://forge.test", transport=_fake_forge(created="2024-03-01T00:00:00Z"),
                         sleep=lambda s: None)
    with pytest.raises(InsufficientHistory):
        fetch_repo_activity("o/r", WINDOW, cache_dir=tmp_path, client=client)


def test_retry_backoff_then_give_up():
    waits = []
    transport = httpx.MockTransport(lambda r: httpx.Response(503))
    client = ForgeClient("https://forge.test", transport=transport, sleep=waits.append, max_retries=3,
                         backoff_base=0.5)
    with pytest.raises(ForgeNetworkError):
        client.get("/repos/o/r")
    assert waits == [0.5, 1.0, 2.0]


def test_rate_limit_respects_retry_after():
    waits, state = [], {"n": 0}

    def handler(request):
        state["n"] += 1
        if state["n"] == 1:
            return httpx.Response(429, headers={"Retry-After": "7"})
        return httpx.Response(200, json={"ok": True})

    client = ForgeClient("https://forge.test", transport=httpx.MockTransport(handler), sleep=waits.append)
    assert client.get("/x") == {"ok": True}
    assert waits == [7.0]


def test_labeled_repo_shape_checked():
    meta = RepoMetadata("r", 3, 1, dt.date(2020, 1, 1), WINDOW.start, WINDOW.end)
    with pytest.raises(ValueError):
        LabeledRepo(meta, np.zeros((23, 20)))
