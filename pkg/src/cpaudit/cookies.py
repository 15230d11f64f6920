"""Cookie extraction, persistence buckets and pre-consent analysis."""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from email.utils import parsedate_to_datetime
from typing import Iterable, NamedTuple, Sequence
from urllib.parse import urlsplit

from .bundle import CookieSnapshotRecord
from .config import DEFAULT_THRESHOLDS, Thresholds
from .domains import OwnershipDb, PartyClassifier
from .pii import pii_kinds_in

logger = logging.getLogger(__name__)

DAY = 86_400
SIX_MONTHS = 182 * DAY
FIVE_YEARS = 1826 * DAY
BUCKETS = ("session", "under_6_months", "six_months_to_5_years", "over_5_years")

_EXPIRES_FORMATS = (
    "%a, %d-%b-%Y %H:%M:%S GMT",
    "%a, %d-%b-%y %H:%M:%S GMT",
    "%A, %d-%b-%y %H:%M:%S GMT",
    "%a, %d %b %Y %H:%M:%S GMT",
    "%a %b %d %H:%M:%S %Y",
)


def lifetime_bucket(seconds: float | None) -> str:
    """Persistence bucket; anything under one day (or no expiry) counts as session."""
    if seconds is None or seconds < DAY:
        return "session"
    if seconds < SIX_MONTHS:
        return "under_6_months"
    if seconds < FIVE_YEARS:
        return "six_months_to_5_years"
    return "over_5_years"


def _parse_expires(text: str) -> int | None:
    text = text.strip().strip('"')
    try:
        dt = parsedate_to_datetime(text)
    except (TypeError, ValueError, IndexError):
        dt = None
    if dt is None:
        for fmt in _EXPIRES_FORMATS:
            try:
                dt = datetime.strptime(text, fmt)
                break
            except ValueError:
                continue
    if dt is None:
        return None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return round(dt.timestamp() * 1000)


class CookieParseError(ValueError):
    pass


class RawCookie(NamedTuple):
    transaction_id: str
    header: str
    reason: str


def _default_path(url: str) -> str:
    path = urlsplit(url).path
    if not path.startswith("/") or path.count("/") <= 1:
        return "/"
    return path[: path.rfind("/")]


def parse_set_cookie(header: str, tx) -> CookieSnapshotRecord:
    parts = header.split(";")
    name, eq, value = parts[0].partition("=")
    name = name.strip()
    if not eq or not name:
        raise CookieParseError("missing name=value pair")
    attrs = {}
    for part in parts[1:]:
        key, _, val = part.partition("=")
        attrs[key.strip().lower()] = val.strip()
    created = tx.ts
    expiry = None
    if "max-age" in attrs:
        try:
            max_age = int(attrs["max-age"])
        except ValueError:
            raise CookieParseError(f"bad Max-Age {attrs['max-age']!r}") from None
        expiry = created + max(max_age, 0) * 1000
    elif "expires" in attrs:
        expiry = _parse_expires(attrs["expires"])
    domain = attrs.get("domain", "").lstrip(".").lower()
    domain = "." + domain if domain else tx.host
    path = attrs.get("path") or _default_path(tx.url)
    return CookieSnapshotRecord(
        domain=domain, name=name, value=value.strip(), creation_time=created, expiry_time=expiry,
        secure="secure" in attrs, http_only="httponly" in attrs, source="set_cookie_header",
        set_by_url=tx.url, phase=tx.phase, path=path,
    )


class CookieList(list):
    """Extracted records; ``raw`` holds Set-Cookie headers that could not be parsed."""

    def __init__(self, records=(), raw=()):
        super().__init__(records)
        self.raw = list(raw)


def extract_cookies(bundle) -> CookieList:
    records, raw = [], []
    for tx in bundle.transactions:
        for header in tx.response_header("set-cookie"):
            for line in header.split("\n"):
                if not line.strip():
                    continue
                try:
                    records.append(parse_set_cookie(line, tx))
                except CookieParseError as exc:
                    raw.append(RawCookie(tx.id, line, str(exc)))
    records.extend(bundle.cookies)
    return CookieList(records, raw)


def shannon_entropy(text: str) -> float:
    if not text:
        return 0.0
    n = len(text)
    return -sum(c / n * math.log2(c / n) for c in Counter(text).values())


def is_identifier_like(value: str, thresholds: Thresholds = DEFAULT_THRESHOLDS) -> bool:
    for prefix in thresholds.identifier_strip_prefixes:
        if value.startswith(prefix):
            value = value[len(prefix):]
    return (len(value) >= thresholds.identifier_min_length
            and shannon_entropy(value) >= thresholds.identifier_min_entropy)


class CookieIdentity(NamedTuple):
    domain: str  # registrable domain
    name: str
    path: str


@dataclass(frozen=True)
class CookieAnalysis:
    record: CookieSnapshotRecord
    registrable_domain: str
    party: str  # first | third
    persistent: bool
    lifetime_seconds: float | None
    bucket: str
    pre_consent: bool
    identifier_like: bool
    pii_hits: tuple[str, ...] = ()

    @property
    def identity(self) -> CookieIdentity:
        return CookieIdentity(self.registrable_domain, self.record.name, self.record.path)

    def to_dict(self):
        return {
            "domain": self.registrable_domain, "name": self.record.name, "path": self.record.path,
            "party": self.party, "persistent": self.persistent,
            "lifetime_seconds": self.lifetime_seconds, "bucket": self.bucket,
            "pre_consent": self.pre_consent, "identifier_like": self.identifier_like,
            "pii_hits": list(self.pii_hits), "source": self.record.source,
        }


def cookie_lifetime(record: CookieSnapshotRecord) -> float | None:
    if record.expiry_time is None:
        return None
    return max(record.expiry_time - record.creation_time, 0) / 1000


def analyze_cookie(record: CookieSnapshotRecord, meta, rules=None, db=None, *,
                   classifier: PartyClassifier | None = None, needles: Sequence = (),
                   thresholds: Thresholds = DEFAULT_THRESHOLDS) -> CookieAnalysis:
    """Classify one cookie. ``needles`` come from pii.compile_needles."""
    if classifier is None:
        classifier = PartyClassifier(meta.owner_domains, db or OwnershipDb(), rules)
    verdict = classifier(record.domain.lstrip("."))
    lifetime = cookie_lifetime(record)
    persistent = lifetime is not None and lifetime >= thresholds.persistent_seconds
    hits = ()
    if needles:
        hits = tuple(pii_kinds_in(record.value, needles))
    return CookieAnalysis(
        record=record,
        registrable_domain=verdict.registrable_domain,
        party="third" if verdict.third_party else "first",
        persistent=persistent,
        lifetime_seconds=lifetime,
        bucket=lifetime_bucket(lifetime) if persistent else "session",
        pre_consent=record.phase == "pre_consent",
        identifier_like=is_identifier_like(record.value, thresholds),
        pii_hits=hits,
    )


def distinct_cookies(analyses: Iterable[CookieAnalysis]) -> dict[CookieIdentity, CookieAnalysis]:
    """One analysis per (registrable domain, name, path); the longest lifetime wins."""
    out: dict[CookieIdentity, CookieAnalysis] = {}
    for a in analyses:
        cur = out.get(a.identity)
        if cur is None or _life(a) > _life(cur):
            # keep pre-consent evidence even when a later re-set lives longer
            if cur is not None and cur.pre_consent and not a.pre_consent:
                a = replace(a, pre_consent=True)
            out[a.identity] = a
        elif a.pre_consent and not cur.pre_consent:
            out[a.identity] = replace(cur, pre_consent=True)
    return dict(sorted(out.items()))


def _life(a: CookieAnalysis) -> float:
    return -1.0 if a.lifetime_seconds is None else a.lifetime_seconds


@dataclass(frozen=True)
class PreConsentSummary:
    evaluable: bool
    cookies: tuple[tuple[CookieIdentity, float], ...] = ()

    @property
    def count(self) -> int | None:
        return len(self.cookies) if self.evaluable else None

    def to_dict(self):
        return {
            "evaluable": self.evaluable,
            "count": self.count,
            "cookies": [{"domain": i.domain, "name": i.name, "path": i.path, "lifetime_seconds": s}
                        for i, s in self.cookies],
        }


def pre_consent_report(analyses: Iterable[CookieAnalysis], meta) -> PreConsentSummary:
    """Persistent cookies created before consent. Without a consent marker the
    question cannot be answered, so the summary is flagged rather than zero."""
    if meta.consent_at is None:
        return PreConsentSummary(False)
    picked = [a for a in analyses if a.persistent and a.pre_consent]
    distinct = distinct_cookies(picked)
    return PreConsentSummary(True, tuple((k, v.lifetime_seconds) for k, v in distinct.items()))
