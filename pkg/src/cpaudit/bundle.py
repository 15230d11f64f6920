"""Capture bundles: the on-disk format for one hotspot session.

A bundle is a directory::

    manifest.json          session metadata (SessionMeta) + format version
    transactions.jsonl     one HttpTransaction per line
    cookies.jsonl          cookie-store snapshot records (optional)
    storage.jsonl          WebStorage key/value snapshot (optional)
    dom/pages.jsonl        page snapshots (optional)
    scripts/scripts.jsonl  script resources (optional)
    bodies/<sha256>        content-addressed bodies

Timestamps are ISO-8601 UTC in files and epoch milliseconds in memory.
"""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping
from urllib.parse import urlsplit

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
BODY_EXCERPT_LIMIT = 1 << 20
HOUR_MS = 3_600_000
DAY_MS = 24 * HOUR_MS

PAGE_TYPES = ("captive_portal", "landing_page")
PLATFORMS = ("desktop", "android")
BROWSING_MODES = ("default", "private", "adblock", "privacy_badger")
PHASES = ("pre_consent", "post_consent", "unknown")
TRANSPORTS = ("plaintext_http", "tls")
COOKIE_SOURCES = ("set_cookie_header", "store_snapshot")


class BundleError(Exception):
    """Fatal problem loading or building a bundle."""


class ValidationError(BundleError):
    def __init__(self, message: str, path: str | os.PathLike | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


class HarError(BundleError):
    pass


class PhaseRangeError(ValueError):
    pass


# -- timestamps ------------------------------------------------------------

def parse_ts(value: str | int | float) -> int:
    """ISO-8601 string (or epoch ms number) -> UTC epoch milliseconds."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return int(value)
    text = str(value).strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return round(dt.timestamp() * 1000)


def format_ts(ms: int) -> str:
    dt = datetime.fromtimestamp(ms / 1000, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ms % 1000:03d}Z"


def transport_for(url: str) -> str:
    return "plaintext_http" if urlsplit(url).scheme.lower() == "http" else "tls"


def body_ref(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# -- records ---------------------------------------------------------------

@dataclass(frozen=True)
class SessionMeta:
    hotspot_id: str
    page_type: str
    collected_at: int
    platform: str = "desktop"
    browser_label: str = ""
    browsing_mode: str = "default"
    consent_at: int | None = None
    owner_domains: tuple[str, ...] = ()
    pii_profile_ref: str | None = None

    def __post_init__(self):
        if not self.hotspot_id:
            raise ValueError("hotspot_id must be non-empty")
        for name, allowed in (("page_type", PAGE_TYPES), ("platform", PLATFORMS),
                              ("browsing_mode", BROWSING_MODES)):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SessionMeta:
        return cls(
            hotspot_id=d["hotspot_id"],
            page_type=d["page_type"],
            collected_at=parse_ts(d["collected_at"]),
            platform=d.get("platform", "desktop"),
            browser_label=d.get("browser_label", ""),
            browsing_mode=d.get("browsing_mode", "default"),
            consent_at=parse_ts(d["consent_at"]) if d.get("consent_at") is not None else None,
            owner_domains=tuple(x.lower() for x in d.get("owner_domains", ())),
            pii_profile_ref=d.get("pii_profile_ref"),
        )

    def to_dict(self) -> dict:
        return {
            "hotspot_id": self.hotspot_id,
            "page_type": self.page_type,
            "platform": self.platform,
            "browser_label": self.browser_label,
            "browsing_mode": self.browsing_mode,
            "collected_at": format_ts(self.collected_at),
            "consent_at": format_ts(self.consent_at) if self.consent_at is not None else None,
            "owner_domains": list(self.owner_domains),
            "pii_profile_ref": self.pii_profile_ref,
        }


Headers = tuple[tuple[str, str], ...]


def _headers(pairs: Iterable) -> Headers:
    return tuple((str(n), str(v)) for n, v in pairs)


@dataclass(frozen=True)
class HttpTransaction:
    id: str
    ts: int
    url: str
    method: str = "GET"
    request_headers: Headers = ()
    status: int | None = None
    response_headers: Headers = ()
    request_body: bytes = b""
    request_body_truncated: bool = False
    response_body_ref: str | None = None
    transport: str = ""
    initiator_page: str | None = None
    phase: str = "unknown"

    def __post_init__(self):
        parts = urlsplit(self.url)
        if parts.scheme.lower() not in ("http", "https") or not parts.hostname:
            raise ValueError(f"not an absolute http(s) URL: {self.url!r}")
        expected = transport_for(self.url)
        if not self.transport:
            object.__setattr__(self, "transport", expected)
        elif self.transport != expected:
            raise ValueError(f"transport {self.transport!r} does not match scheme of {self.url!r}")
        if self.phase not in PHASES:
            raise ValueError(f"bad phase {self.phase!r}")
        if len(self.request_body) > BODY_EXCERPT_LIMIT:
            object.__setattr__(self, "request_body", self.request_body[:BODY_EXCERPT_LIMIT])
            object.__setattr__(self, "request_body_truncated", True)

    @property
    def host(self) -> str:
        return urlsplit(self.url).hostname or ""

    def request_header(self, name: str) -> list[str]:
        name = name.lower()
        return [v for n, v in self.request_headers if n.lower() == name]

    def response_header(self, name: str) -> list[str]:
        name = name.lower()
        return [v for n, v in self.response_headers if n.lower() == name]

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> HttpTransaction:
        if "request_body_b64" in d:
            body = base64.b64decode(d["request_body_b64"])
        else:
            body = d.get("request_body", "").encode("utf-8")
        return cls(
            id=str(d["id"]),
            ts=parse_ts(d["ts"]),
            url=d["url"],
            method=d.get("method", "GET"),
            request_headers=_headers(d.get("request_headers", ())),
            status=d.get("status"),
            response_headers=_headers(d.get("response_headers", ())),
            request_body=body,
            request_body_truncated=bool(d.get("request_body_truncated", False)),
            response_body_ref=d.get("response_body_ref"),
            transport=d.get("transport", ""),
            initiator_page=d.get("initiator_page"),
            phase=d.get("phase", "unknown"),
        )

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "id": self.id,
            "ts": format_ts(self.ts),
            "url": self.url,
            "method": self.method,
            "request_headers": [list(h) for h in self.request_headers],
            "status": self.status,
            "response_headers": [list(h) for h in self.response_headers],
        }
        if self.request_body:
            try:
                d["request_body"] = self.request_body.decode("utf-8")
            except UnicodeDecodeError:
                d["request_body_b64"] = base64.b64encode(self.request_body).decode("ascii")
        d.update({
            "request_body_truncated": self.request_body_truncated,
            "response_body_ref": self.response_body_ref,
            "transport": self.transport,
            "initiator_page": self.initiator_page,
            "phase": self.phase,
        })
        return d


@dataclass(frozen=True)
class CookieSnapshotRecord:
    domain: str
    name: str
    value: str
    creation_time: int
    expiry_time: int | None = None
    secure: bool = False
    http_only: bool = False
    source: str = "store_snapshot"
    set_by_url: str | None = None
    phase: str = "unknown"
    path: str = "/"

    @property
    def is_session(self) -> bool:
        return self.expiry_time is None

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> CookieSnapshotRecord:
        source = d.get("source", "store_snapshot")
        if source not in COOKIE_SOURCES:
            raise ValueError(f"bad cookie source {source!r}")
        phase = d.get("phase", "unknown")
        if phase not in PHASES:
            raise ValueError(f"bad phase {phase!r}")
        return cls(
            domain=d["domain"].lower(),
            name=d["name"],
            value=d.get("value", ""),
            creation_time=parse_ts(d["creation_time"]),
            expiry_time=parse_ts(d["expiry_time"]) if d.get("expiry_time") is not None else None,
            secure=bool(d.get("secure", False)),
            http_only=bool(d.get("http_only", False)),
            source=source,
            set_by_url=d.get("set_by_url"),
            phase=phase,
            path=d.get("path", "/") or "/",
        )

    def to_dict(self) -> dict:
        return {
            "domain": self.domain,
            "name": self.name,
            "value": self.value,
            "path": self.path,
            "creation_time": format_ts(self.creation_time),
            "expiry_time": format_ts(self.expiry_time) if self.expiry_time is not None else None,
            "secure": self.secure,
            "http_only": self.http_only,
            "source": self.source,
            "set_by_url": self.set_by_url,
            "phase": self.phase,
        }


@dataclass(frozen=True)
class PageSnapshot:
    url: str
    html_body_ref: str
    phase: str = "unknown"

    @classmethod
    def from_dict(cls, d):
        return cls(url=d["url"], html_body_ref=d["html_body_ref"], phase=d.get("phase", "unknown"))

    def to_dict(self):
        return {"url": self.url, "html_body_ref": self.html_body_ref, "phase": self.phase}


@dataclass(frozen=True)
class ScriptResource:
    """External script (``url``) or inline script found on ``page_url``."""

    body_ref: str
    url: str | None = None
    page_url: str | None = None
    phase: str = "unknown"

    @property
    def ref(self) -> str:
        return self.url or f"inline:{self.page_url}#{self.body_ref[:12]}"

    @property
    def serving_url(self) -> str | None:
        return self.url or self.page_url

    @classmethod
    def from_dict(cls, d):
        if not d.get("url") and not d.get("page_url"):
            raise ValueError("script needs url or page_url")
        return cls(body_ref=d["body_ref"], url=d.get("url"), page_url=d.get("page_url"),
                   phase=d.get("phase", "unknown"))

    def to_dict(self):
        return {"url": self.url, "page_url": self.page_url, "body_ref": self.body_ref, "phase": self.phase}


@dataclass(frozen=True)
class StorageItem:
    origin: str
    key: str
    value: str
    area: str = "local"
    phase: str = "unknown"

    @classmethod
    def from_dict(cls, d):
        return cls(origin=d["origin"], key=d["key"], value=d.get("value", ""),
                   area=d.get("area", "local"), phase=d.get("phase", "unknown"))

    def to_dict(self):
        return {"origin": self.origin, "key": self.key, "value": self.value,
                "area": self.area, "phase": self.phase}


@dataclass(frozen=True)
class ConversionReport:
    entries: int
    converted: int
    skipped: tuple[tuple[int, str], ...] = ()

    @property
    def skipped_count(self) -> int:
        return len(self.skipped)


@dataclass(frozen=True)
class CaptureBundle:
    meta: SessionMeta
    transactions: tuple[HttpTransaction, ...] = ()
    cookies: tuple[CookieSnapshotRecord, ...] = ()
    pages: tuple[PageSnapshot, ...] = ()
    scripts: tuple[ScriptResource, ...] = ()
    storage: tuple[StorageItem, ...] = ()
    bodies: Mapping[str, bytes] = field(default_factory=dict, compare=True)
    conversion: ConversionReport | None = field(default=None, compare=False)

    def body(self, ref: str) -> bytes:
        return self.bodies[ref]

    def time_range(self) -> tuple[int, int] | None:
        if not self.transactions:
            return None
        stamps = [t.ts for t in self.transactions]
        return min(stamps), max(stamps)

    @property
    def phases_marked(self) -> bool:
        return self.meta.consent_at is not None

    def validate(self) -> None:
        ids = set()
        for tx in self.transactions:
            if tx.id in ids:
                raise ValidationError(f"duplicate transaction id {tx.id!r}")
            ids.add(tx.id)
            if tx.ts // DAY_MS * DAY_MS + 2 * DAY_MS < self.meta.collected_at:
                raise ValidationError(
                    f"transaction {tx.id} at {format_ts(tx.ts)} is outside the collection window")
            if (tx.phase == "pre_consent" and self.meta.consent_at is not None
                    and tx.ts >= self.meta.consent_at):
                raise ValidationError(f"transaction {tx.id} marked pre_consent after consent_at")
        missing = sorted(self._dangling_refs())
        if missing:
            raise ValidationError("unresolvable body ref(s): " + ", ".join(missing))

    def _dangling_refs(self):
        refs = [t.response_body_ref for t in self.transactions if t.response_body_ref]
        refs += [p.html_body_ref for p in self.pages]
        refs += [s.body_ref for s in self.scripts]
        return {r for r in refs if r not in self.bodies}


# -- load / save -----------------------------------------------------------

MANIFEST = "manifest.json"
TRANSACTIONS = "transactions.jsonl"
COOKIES = "cookies.jsonl"
STORAGE = "storage.jsonl"
PAGES = os.path.join("dom", "pages.jsonl")
SCRIPTS = os.path.join("scripts", "scripts.jsonl")
BODIES = "bodies"


def _read_jsonl(path: Path, factory) -> list:
    out = []
    if not path.exists():
        return out
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(factory(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValidationError(f"malformed record: {exc}", path, lineno) from exc
    return out


def load_bundle(path: str | os.PathLike) -> CaptureBundle:
    root = Path(path)
    manifest_path = root / MANIFEST
    if not manifest_path.is_file():
        raise BundleError(f"{root}: missing {MANIFEST}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        meta = SessionMeta.from_dict(manifest["session"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ValidationError(f"bad manifest: {exc}", manifest_path) from exc
    if manifest.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
        raise ValidationError(f"unsupported format_version {manifest.get('format_version')}", manifest_path)
    if not (root / TRANSACTIONS).is_file():
        raise BundleError(f"{root}: missing {TRANSACTIONS}")

    transactions = _read_jsonl(root / TRANSACTIONS, HttpTransaction.from_dict)
    cookies = _read_jsonl(root / COOKIES, CookieSnapshotRecord.from_dict)
    storage = _read_jsonl(root / STORAGE, StorageItem.from_dict)
    pages = _read_jsonl(root / PAGES, PageSnapshot.from_dict)
    scripts = _read_jsonl(root / SCRIPTS, ScriptResource.from_dict)

    wanted = {t.response_body_ref for t in transactions if t.response_body_ref}
    wanted |= {p.html_body_ref for p in pages} | {s.body_ref for s in scripts}
    bodies = {}
    for ref in sorted(wanted):
        fp = root / BODIES / ref
        if not fp.is_file():
            continue  # reported by validate()
        data = fp.read_bytes()
        if body_ref(data) != ref:
            raise ValidationError(f"body {ref} does not match its content hash", fp)
        bodies[ref] = data

    bundle = CaptureBundle(meta=meta, transactions=tuple(transactions), cookies=tuple(cookies),
                           pages=tuple(pages), scripts=tuple(scripts), storage=tuple(storage),
                           bodies=bodies)
    bundle.validate()
    return bundle


def _write_jsonl(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True))
            fh.write("\n")


def save_bundle(bundle: CaptureBundle, path: str | os.PathLike) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": FORMAT_VERSION, "session": bundle.meta.to_dict()}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_jsonl(root / TRANSACTIONS, (t.to_dict() for t in bundle.transactions))
    if bundle.cookies:
        _write_jsonl(root / COOKIES, (c.to_dict() for c in bundle.cookies))
    if bundle.storage:
        _write_jsonl(root / STORAGE, (s.to_dict() for s in bundle.storage))
    if bundle.pages:
        _write_jsonl(root / PAGES, (p.to_dict() for p in bundle.pages))
    if bundle.scripts:
        _write_jsonl(root / SCRIPTS, (s.to_dict() for s in bundle.scripts))
    if bundle.bodies:
        (root / BODIES).mkdir(exist_ok=True)
        for ref, data in bundle.bodies.items():
            (root / BODIES / ref).write_bytes(data)
    return root


# -- consent phases --------------------------------------------------------

def _phase(ts: int, consent_at: int) -> str:
    # ties go to post_consent
    return "pre_consent" if ts < consent_at else "post_consent"


def mark_phase(bundle: CaptureBundle, consent_at: int | str) -> CaptureBundle:
    consent_ms = parse_ts(consent_at)
    span = bundle.time_range()
    if span is not None:
        lo, hi = span[0] - HOUR_MS, span[1] + HOUR_MS
        if not lo <= consent_ms <= hi:
            raise PhaseRangeError(
                f"consent_at {format_ts(consent_ms)} outside bundle range "
                f"[{format_ts(lo)}, {format_ts(hi)}]")
    txs = tuple(replace(t, phase=_phase(t.ts, consent_ms)) for t in bundle.transactions)
    cookies = tuple(replace(c, phase=_phase(c.creation_time, consent_ms)) for c in bundle.cookies)
    return replace(bundle, meta=replace(bundle.meta, consent_at=consent_ms),
                   transactions=txs, cookies=cookies)


# -- HAR conversion --------------------------------------------------------

def _har_content(content: Mapping) -> bytes | None:
    text = content.get("text")
    if text is None:
        return None
    if content.get("encoding") == "base64":
        try:
            return base64.b64decode(text)
        except ValueError:
            return None
    return text.encode("utf-8")


def convert_har(har: str | os.PathLike | Mapping, meta: SessionMeta) -> CaptureBundle:
    """Convert a HAR 1.2 document into a bundle, one transaction per usable entry."""
    if not isinstance(har, Mapping):
        try:
            har = json.loads(Path(har).read_text(encoding="utf-8"))
        except ValueError as exc:
            raise HarError(f"not JSON: {exc}") from exc
    log = har.get("log") if isinstance(har, Mapping) else None
    if not isinstance(log, Mapping) or not isinstance(log.get("entries"), list):
        raise HarError("not a HAR document: missing log.entries")

    txs, pages, scripts, bodies, skipped = [], [], [], {}, []
    for i, entry in enumerate(log["entries"]):
        try:
            req, resp = entry["request"], entry.get("response") or {}
            ts = parse_ts(entry["startedDateTime"])
            body = b""
            post = req.get("postData") or {}
            if post.get("text"):
                body = post["text"].encode("utf-8")
            ref = None
            payload = _har_content(resp.get("content") or {})
            if payload:
                ref = body_ref(payload)
                bodies[ref] = payload
            req_headers = _headers((h["name"], h["value"]) for h in req.get("headers", ()))
            referer = next((v for n, v in req_headers if n.lower() == "referer"), None)
            initiator = (entry.get("_initiator") or {}).get("url") or referer
            tx = HttpTransaction(
                id=f"har-{i:05d}",
                ts=ts,
                url=req["url"],
                method=req.get("method", "GET"),
                request_headers=req_headers,
                status=resp.get("status"),
                response_headers=_headers((h["name"], h["value"]) for h in resp.get("headers", ())),
                request_body=body,
                response_body_ref=ref,
                initiator_page=initiator,
            )
        except (KeyError, TypeError, ValueError) as exc:
            skipped.append((i, str(exc)))
            continue
        txs.append(tx)
        if ref:
            mime = ((resp.get("content") or {}).get("mimeType") or "").split(";")[0].strip().lower()
            if mime == "text/html":
                pages.append(PageSnapshot(url=tx.url, html_body_ref=ref))
            elif "javascript" in mime or mime == "text/ecmascript":
                scripts.append(ScriptResource(body_ref=ref, url=tx.url))

    for idx, reason in skipped:
        logger.warning("HAR entry %d skipped: %s", idx, reason)
    bundle = CaptureBundle(
        meta=meta, transactions=tuple(txs), pages=tuple(pages), scripts=tuple(scripts),
        bodies=bodies,
        conversion=ConversionReport(entries=len(log["entries"]), converted=len(txs), skipped=tuple(skipped)),
    )
    if meta.consent_at is not None:
        bundle = replace(mark_phase(bundle, meta.consent_at), conversion=bundle.conversion)
    bundle.validate()
    return bundle
