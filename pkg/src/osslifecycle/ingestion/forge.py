"""Forge REST client with an on-disk response cache.

The client speaks the GitHub v3 REST dialect (configurable base URL). Raw
responses are cached per ``(repo_id, window)`` as a single JSON document,
so repeated fetches are served from disk without touching the network.
The auth token, if any, is read from ``OSSLC_FORGE_TOKEN`` (falling back to
``GITHUB_TOKEN``).
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import os
import re
import tempfile
import threading
import time
from pathlib import Path
from typing import Any, Callable

import httpx

from .aggregate import parse_time
from .records import Window

logger = logging.getLogger(__name__)

DEFAULT_BASE_URL = "https://api.github.com"
TOKEN_ENV_VARS = ("OSSLC_FORGE_TOKEN", "GITHUB_TOKEN")
CACHE_VERSION = 1


class ForgeError(RuntimeError):
    pass


class RepositoryNotFound(ForgeError):
    pass


class InsufficientHistory(ForgeError):
    """The repository is younger than the requested observation window."""


class ForgeNetworkError(ForgeError):
    """Retries exhausted on a transient failure."""


class TokenBucket:
    """Thread-safe token bucket shared by concurrent fetchers."""

    def __init__(self, rate: float, capacity: int, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if rate <= 0 or capacity < 1:
            raise ValueError("rate must be > 0 and capacity >= 1")
        self.rate = rate
        self.capacity = capacity
        self._tokens = float(capacity)
        self._clock = clock
        self._sleep = sleep
        self._stamp = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._stamp) * self.rate)
                self._stamp = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                wait = (1 - self._tokens) / self.rate
            self._sleep(wait)


def _cache_path(cache_dir: Path, repo_id: str, window: Window) -> Path:
    safe = re.sub(r"[^A-Za-z0-9._-]+", "__", repo_id)
    return cache_dir / safe / f"{window.key()}.json"


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def resolve_token(credentials: str | None) -> str | None:
    if credentials:
        return credentials
    for var in TOKEN_ENV_VARS:
        if os.environ.get(var):
            return os.environ[var]
    return None


class ForgeClient:
    """Paginating GET client with retry, backoff and rate-limit handling."""

    def __init__(self, base_url: str = DEFAULT_BASE_URL, token: str | None = None, *,
                 transport: httpx.BaseTransport | None = None, max_retries: int = 5,
                 backoff_base: float = 1.0, max_rate_wait: float = 3600.0, per_page: int = 100,
                 max_pages: int = 200, bucket: TokenBucket | None = None,
                 sleep: Callable[[float], None] = time.sleep, clock: Callable[[], float] = time.time):
        headers = {"Accept": "application/vnd.github+json", "User-Agent": "osslifecycle"}
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._http = httpx.Client(base_url=base_url, headers=headers, transport=transport, timeout=30.0)
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.max_rate_wait = max_rate_wait
        self.per_page = per_page
        self.max_pages = max_pages
        self.bucket = bucket
        self._sleep = sleep
        self._clock = clock
        self.requests_made = 0

    def close(self) -> None:
        self._http.close()

    def get(self, path: str, params: dict[str, Any] | None = None) -> Any:
        for attempt in range(self.max_retries + 1):
            if self.bucket is not None:
                self.bucket.acquire()
            try:
                self.requests_made += 1
                resp = self._http.get(path, params=params)
            except httpx.TransportError as exc:
                self._backoff(attempt, f"{path}: {exc}")
                continue
            if resp.status_code == 404:
                raise RepositoryNotFound(f"not found: {path}")
            if resp.status_code in (403, 429) and self._rate_limited(resp):
                self._wait_for_reset(resp, attempt, path)
                continue
            if resp.status_code >= 500:
                self._backoff(attempt, f"{path}: HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise ForgeError(f"{path}: HTTP {resp.status_code}: {resp.text[:200]}")
            return resp.json()
        raise ForgeNetworkError(f"{path}: giving up after {self.max_retries + 1} attempts")

    def paginate(self, path: str, params: dict[str, Any] | None = None) -> list[Any]:
        pages = []
        for page in range(1, self.max_pages + 1):
            body = self.get(path, {**(params or {}), "per_page": self.per_page, "page": page})
            pages.append(body)
            if not isinstance(body, list) or len(body) < self.per_page:
                break
        return pages

    @staticmethod
    def _rate_limited(resp: httpx.Response) -> bool:
        return resp.headers.get("X-RateLimit-Remaining") == "0" or "Retry-After" in resp.headers

    def _wait_for_reset(self, resp: httpx.Response, attempt: int, path: str) -> None:
        if attempt >= self.max_retries:
            raise ForgeNetworkError(f"{path}: rate limit not lifted after {attempt + 1} attempts")
        if "Retry-After" in resp.headers:
            wait = float(resp.headers["Retry-After"])
        else:
            reset = float(resp.headers.get("X-RateLimit-Reset", self._clock() + 60))
            wait = reset - self._clock()
        wait = min(max(wait, 1.0), self.max_rate_wait)
        logger.warning("rate limited on %s; sleeping %.0fs", path, wait)
        self._sleep(wait)

    def _backoff(self, attempt: int, reason: str) -> None:
        if attempt >= self.max_retries:
            raise ForgeNetworkError(f"{reason}; giving up after {attempt + 1} attempts")
        wait = self.backoff_base * 2 ** attempt
        logger.warning("transient failure (%s); retrying in %.1fs", reason, wait)
        self._sleep(wait)


def fetch_repo_activity(
    repo_id: str,
    window: Window,
    credentials: str | None = None,
    cache_dir: str | Path = ".forge-cache",
    *,
    base_url: str = DEFAULT_BASE_URL,
    client: ForgeClient | None = None,
    lookback_months: int = 12,
) -> list[dict[str, Any]]:
    """Fetch raw activity pages for ``repo_id`` covering ``window``.

    Returns a list of ``{"endpoint", "params", "body"}`` entries. The first
    entry is always the repository document. A cache hit returns the stored
    pages without any network access.
    """
    path = _cache_path(Path(cache_dir), repo_id, window)
    if path.exists():
        doc = json.loads(path.read_text(encoding="utf-8"))
        return doc["pages"]

    own_client = client is None
    if own_client:
        client = ForgeClient(base_url, resolve_token(credentials))
    try:
        pages = _fetch_uncached(client, repo_id, window, lookback_months)
    finally:
        if own_client:
            client.close()

    doc = {"cache_version": CACHE_VERSION, "repo_id": repo_id, "window": window.key(),
           "lookback_months": lookback_months, "pages": pages}
    _atomic_write(path, json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8"))
    return pages


def _iso(d: dt.datetime) -> str:
    return d.strftime("%Y-%m-%dT%H:%M:%SZ")


def _fetch_uncached(client: ForgeClient, repo_id: str, window: Window, lookback_months: int) -> list[dict]:
    base = f"/repos/{repo_id}"
    repo = client.get(base)
    created = parse_time(repo.get("created_at"))
    if created is None or created >= window.start_datetime():
        raise InsufficientHistory(
            f"{repo_id} was created {repo.get('created_at')}, after the window start {window.start}")

    start, end = window.start_datetime(), window.end_datetime()
    lookback = Window(window.start.shift(-lookback_months)).start_datetime()
    pages: list[dict] = [{"endpoint": base, "params": {}, "body": repo}]

    def collect(endpoint: str, params: dict[str, Any]) -> list[Any]:
        bodies = client.paginate(endpoint, params)
        for b in bodies:
            pages.append({"endpoint": endpoint, "params": params, "body": b})
        return [item for b in bodies if isinstance(b, list) for item in b]

    collect(f"{base}/commits", {"since": _iso(lookback), "until": _iso(end)})
    collect(f"{base}/contributors", {"anon": "1"})
    pulls = collect(f"{base}/pulls", {"state": "all", "sort": "created", "direction": "asc"})
    collect(f"{base}/issues", {"state": "all", "since": _iso(start)})
    collect(f"{base}/issues/comments", {"since": _iso(start)})
    collect(f"{base}/pulls/comments", {"since": _iso(start)})
    collect(f"{base}/releases", {})
    for pr in pulls:
        opened = parse_time(pr.get("created_at"))
        if opened is not None and start <= opened < end:
            endpoint = f"{base}/pulls/{pr['number']}"
            pages.append({"endpoint": endpoint, "params": {}, "body": client.get(endpoint)})
    return pages


def _login(obj: Any) -> str | None:
    if isinstance(obj, dict):
        return obj.get("login")
    return None


def normalize_events(pages: list[dict[str, Any]], window: Window) -> dict[str, Any]:
    """Convert raw pages into normalized events plus labeling inputs.

    Returns ``{"events", "forge_metadata", "prior_contributors",
    "previous_month_contributors"}``; pass ``events`` to
    :func:`aggregate_monthly` and ``forge_metadata`` to
    :func:`snapshot_metadata`.
    """
    repo = pages[0]["body"]
    repo_base = pages[0]["endpoint"]
    start, end = window.start_datetime(), window.end_datetime()
    prev_start = Window(window.start.shift(-1)).start_datetime()

    def in_window(ts: dt.datetime | None) -> bool:
        return ts is not None and start <= ts < end

    by_endpoint: dict[str, list[Any]] = {}
    details: dict[int, dict] = {}
    for p in pages[1:]:
        ep = p["endpoint"]
        m = re.fullmatch(re.escape(repo_base) + r"/pulls/(\d+)", ep)
        if m:
            details[int(m.group(1))] = p["body"]
        elif isinstance(p["body"], list):
            by_endpoint.setdefault(ep[len(repo_base):], []).extend(p["body"])

    events: list[dict[str, Any]] = []
    prior: set[str] = set()
    previous: set[str] = set()
    for c in by_endpoint.get("/commits", []):
        commit = c.get("commit", {})
        when = parse_time((commit.get("author") or {}).get("date"))
        author = _login(c.get("author")) or (commit.get("author") or {}).get("name") or "<unknown>"
        if when is None:
            continue
        if when < start:
            prior.add(author)
            if when >= prev_start:
                previous.add(author)
        elif when < end:
            events.append({"type": "commit", "at": when.isoformat(), "author": author})

    pr_authors: dict[int, str | None] = {}
    for pr in by_endpoint.get("/pulls", []):
        pr_authors[pr["number"]] = _login(pr.get("user"))

    first_response: dict[int, dt.datetime] = {}

    def note_response(number: int, author: str | None, when: dt.datetime | None, issue_author: str | None):
        if when is None or author is None or author == issue_author:
            return
        if number not in first_response or when < first_response[number]:
            first_response[number] = when

    issue_authors: dict[int, str | None] = {}
    issues = [i for i in by_endpoint.get("/issues", []) if "pull_request" not in i]
    for issue in issues:
        issue_authors[issue["number"]] = _login(issue.get("user"))

    for com in by_endpoint.get("/issues/comments", []):
        number = int(str(com.get("issue_url", "")).rstrip("/").rsplit("/", 1)[-1] or -1)
        when = parse_time(com.get("created_at"))
        who = _login(com.get("user"))
        is_pr = number in pr_authors
        note_response(number, who, when, pr_authors.get(number) if is_pr else issue_authors.get(number))
        if in_window(when):
            events.append({"type": "pr_comment" if is_pr else "issue_comment", "at": when.isoformat()})

    for com in by_endpoint.get("/pulls/comments", []):
        number = int(str(com.get("pull_request_url", "")).rstrip("/").rsplit("/", 1)[-1] or -1)
        when = parse_time(com.get("created_at"))
        note_response(number, _login(com.get("user")), when, pr_authors.get(number))
        if in_window(when):
            events.append({"type": "pr_review_comment", "at": when.isoformat()})

    for pr in by_endpoint.get("/pulls", []):
        opened, closed = parse_time(pr.get("created_at")), parse_time(pr.get("closed_at"))
        first = first_response.get(pr["number"])
        if not (in_window(opened) or in_window(closed) or in_window(first)):
            continue
        detail = details.get(pr["number"], {})
        events.append({
            "type": "pull_request", "at": opened.isoformat(), "author": _login(pr.get("user")),
            "commits": detail.get("commits", 0), "changed_files": detail.get("changed_files", 0),
            "closed_at": closed.isoformat() if closed else None, "merged": bool(pr.get("merged_at")),
            "first_response_at": first.isoformat() if first else None,
        })

    for issue in issues:
        opened, closed = parse_time(issue.get("created_at")), parse_time(issue.get("closed_at"))
        first = first_response.get(issue["number"])
        if not (in_window(opened) or in_window(closed) or in_window(first)):
            continue
        events.append({
            "type": "issue", "at": opened.isoformat(), "author": _login(issue.get("user")),
            "closed_at": closed.isoformat() if closed else None,
            "first_response_at": first.isoformat() if first else None,
        })

    for rel in by_endpoint.get("/releases", []):
        when = parse_time(rel.get("published_at") or rel.get("created_at"))
        if in_window(when):
            events.append({"type": "release", "at": when.isoformat()})

    contributors = [_login(c) or c.get("name") or c.get("email") for c in by_endpoint.get("/contributors", [])]
    forge_metadata = {
        "full_name": repo.get("full_name"),
        "created_at": repo.get("created_at"),
        "contributors": [c for c in contributors if c],
    }
    if "stargazers_count" in repo:
        forge_metadata["stargazers_count"] = repo["stargazers_count"]
    return {
        "events": events,
        "forge_metadata": forge_metadata,
        "prior_contributors": sorted(prior),
        "previous_month_contributors": sorted(previous),
    }
