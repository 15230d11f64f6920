"""Seeded-PII and device-identifier leak detection.

Every profile value is expanded into encoded variants (percent-encoding,
base64, hex, hashes, MAC spellings) which are searched as substrings of
each outgoing channel of a transaction: request URL, Referer, Cookie,
other request headers, request body, plus WebStorage snapshots.

Hashes cover only the case-folded, trimmed value; salted or truncated
hashes are not detectable this way.
"""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence
from urllib.parse import quote, quote_plus, urlsplit

from .config import DEFAULT_THRESHOLDS

logger = logging.getLogger(__name__)

PII_KINDS = ("full_name", "first_name", "last_name", "email", "phone", "postal_code",
             "date_of_birth", "age", "mac_address", "membership_number", "profile_url")
ENCODINGS = ("plain", "case_folded", "url_encoded", "base64", "base64_urlsafe", "hex",
             "md5", "sha1", "sha256", "mac_format_variant")
CHANNELS = ("request_url", "referrer_header", "cookie", "other_header", "request_body", "web_storage")

# searched case-insensitively; everything else must match byte for byte
_FOLDED = frozenset({"case_folded", "hex", "md5", "sha1", "sha256"})
_MAC_RE = re.compile(r"^[0-9a-f]{12}$")


class VariantError(ValueError):
    pass


class ProfileError(ValueError):
    pass


def canonical_mac(value: str) -> str:
    bare = re.sub(r"[^0-9a-fA-F]", "", value).lower()
    if not _MAC_RE.match(bare) or len(re.sub(r"[:\-.\s]", "", value)) != 12:
        raise ProfileError(f"not a MAC address: {value!r}")
    return ":".join(bare[i:i + 2] for i in range(0, 12, 2))


@dataclass(frozen=True)
class PiiItem:
    kind: str
    value: str

    def __post_init__(self):
        if self.kind not in PII_KINDS:
            raise ProfileError(f"unknown PII kind {self.kind!r}")
        if not self.value:
            raise ProfileError(f"empty value for {self.kind}")
        if self.kind == "mac_address":
            object.__setattr__(self, "value", canonical_mac(self.value))


@dataclass(frozen=True)
class PiiProfile:
    items: tuple[PiiItem, ...] = ()

    @classmethod
    def from_dict(cls, d) -> PiiProfile:
        if isinstance(d, Mapping) and "items" in d:
            pairs = [(x["kind"], x["value"]) for x in d["items"]]
        elif isinstance(d, Mapping):
            pairs = []
            for kind, value in d.items():
                values = value if isinstance(value, list) else [value]
                pairs += [(kind, str(v)) for v in values]
        else:
            raise ProfileError("profile must be a JSON object")
        return cls(tuple(PiiItem(k, v) for k, v in pairs))

    def to_dict(self):
        return {"items": [{"kind": i.kind, "value": i.value} for i in self.items]}


def load_profile(path: str | os.PathLike) -> PiiProfile:
    try:
        return PiiProfile.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except ValueError as exc:
        raise ProfileError(f"{path}: {exc}") from exc


class Variant(NamedTuple):
    encoding: str
    needle: bytes


def expand_variants(item: PiiItem, min_length: int = DEFAULT_THRESHOLDS.pii_min_length) -> list[Variant]:
    """Encoded spellings of one profile value, in priority order, without duplicate needles."""
    value = item.value
    if len(value.strip()) < min_length:
        raise VariantError(f"{item.kind} value shorter than {min_length} characters")
    folded = value.strip().casefold()
    fb = folded.encode("utf-8")
    out = [
        ("plain", value.encode("utf-8")),
        ("case_folded", fb),
        ("url_encoded", quote(value, safe="").encode("ascii")),
        ("url_encoded", quote_plus(value, safe="").encode("ascii")),
        ("url_encoded", quote(folded, safe="").encode("ascii")),
        ("base64", base64.b64encode(fb)),
        ("base64_urlsafe", base64.urlsafe_b64encode(fb)),
        ("hex", fb.hex().encode("ascii")),
        ("md5", hashlib.md5(fb).hexdigest().encode("ascii")),
        ("sha1", hashlib.sha1(fb).hexdigest().encode("ascii")),
        ("sha256", hashlib.sha256(fb).hexdigest().encode("ascii")),
    ]
    if item.kind == "mac_address":
        octets = value.split(":")
        for sep in (":", "-", ""):
            for case in (str.lower, str.upper):
                out.append(("mac_format_variant", case(sep.join(octets)).encode("ascii")))
    seen, variants = set(), []
    for enc, needle in out:
        if needle in seen:
            continue
        seen.add(needle)
        variants.append(Variant(enc, needle))
    return variants


@dataclass(frozen=True)
class _Needle:
    kind: str
    encoding: str
    exact: bytes
    search: bytes  # lowered, base64 padding stripped
    folded: bool


def compile_needles(profile: PiiProfile, min_length: int = DEFAULT_THRESHOLDS.pii_min_length) -> list[_Needle]:
    needles = []
    for item in profile.items:
        try:
            variants = expand_variants(item, min_length)
        except VariantError as exc:
            logger.warning("profile item rejected: %s", exc)
            continue
        for enc, needle in variants:
            exact = needle.rstrip(b"=") if enc.startswith("base64") else needle
            needles.append(_Needle(item.kind, enc, exact, exact.lower(), enc in _FOLDED))
    return needles


def find_in_bytes(haystack: bytes, needles: Sequence[_Needle]):
    """Yield (needle, offset) for every verified hit; a span already claimed by an
    earlier (higher-priority) variant of the same item is not reported again."""
    if not haystack:
        return
    lowered = haystack.lower()
    claimed = set()
    for nd in needles:
        n = len(nd.search)
        start = lowered.find(nd.search)
        while start >= 0:
            span = (nd.kind, start, start + n)
            ok = nd.folded or haystack[start:start + n] == nd.exact
            if ok and span not in claimed:
                claimed.add(span)
                yield nd, start
            start = lowered.find(nd.search, start + 1)


def pii_kinds_in(text: str, needles: Sequence[_Needle]) -> list[str]:
    return sorted({nd.kind for nd, _ in find_in_bytes(text.encode("utf-8"), needles)})


@dataclass(frozen=True)
class LeakFinding:
    kind: str
    encoding: str
    channel: str
    transport: str
    destination: str
    party: str
    phase: str
    transaction_id: str
    offset: int
    location: str = ""
    url: str = ""
    tracker_status: str | None = None

    def to_dict(self):
        return {
            "kind": self.kind, "encoding": self.encoding, "channel": self.channel,
            "transport": self.transport, "destination": self.destination, "party": self.party,
            "tracker_status": self.tracker_status, "phase": self.phase,
            "transaction_id": self.transaction_id, "offset": self.offset,
            "location": self.location, "url": self.url,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _tx_channels(tx):
    yield "request_url", "", tx.url.encode("utf-8")
    for name, value in tx.request_headers:
        low = name.lower()
        if low == "referer":
            yield "referrer_header", name, value.encode("utf-8")
        elif low == "cookie":
            yield "cookie", name, value.encode("utf-8")
        else:
            yield "other_header", name, value.encode("utf-8")
    if tx.request_body:
        yield "request_body", "", tx.request_body


def scan_bundle(bundle, profile: PiiProfile, classifier,
                tracker_status: Mapping[str, str] | None = None,
                min_length: int = DEFAULT_THRESHOLDS.pii_min_length) -> list[LeakFinding]:
    """Scan outgoing traffic and WebStorage of a bundle for profile values.

    ``classifier`` maps a host to a PartyVerdict (domains.PartyClassifier).
    Findings are unique per (item, encoding, channel, transaction).
    """
    needles = compile_needles(profile, min_length)
    if not needles:
        return []
    findings = {}
    for tx in bundle.transactions:
        verdict = classifier(tx.host)
        for channel, location, data in _tx_channels(tx):
            for nd, offset in find_in_bytes(data, needles):
                key = (nd.kind, nd.encoding, channel, tx.id)
                if key in findings:
                    continue
                findings[key] = LeakFinding(
                    kind=nd.kind, encoding=nd.encoding, channel=channel, transport=tx.transport,
                    destination=verdict.registrable_domain, party=verdict.party, phase=tx.phase,
                    transaction_id=tx.id, offset=offset, location=location, url=tx.url,
                )
    for item in bundle.storage:
        host = urlsplit(item.origin).hostname or item.origin
        verdict = classifier(host)
        txid = f"storage:{item.area}:{item.origin}:{item.key}"
        transport = "plaintext_http" if item.origin.lower().startswith("http:") else "tls"
        for nd, offset in find_in_bytes(item.value.encode("utf-8"), needles):
            key = (nd.kind, nd.encoding, "web_storage", txid)
            if key not in findings:
                findings[key] = LeakFinding(
                    kind=nd.kind, encoding=nd.encoding, channel="web_storage", transport=transport,
                    destination=verdict.registrable_domain, party=verdict.party, phase=item.phase,
                    transaction_id=txid, offset=offset, location=item.key, url=item.origin,
                )
    out = list(findings.values())
    if tracker_status:
        out = [replace(f, tracker_status=tracker_status.get(f.destination, "non_tracker")) for f in out]
    out.sort(key=_finding_order)
    return out


def _finding_order(f: LeakFinding):
    return (f.transaction_id, CHANNELS.index(f.channel), f.location, f.offset,
            PII_KINDS.index(f.kind), ENCODINGS.index(f.encoding))


def mac_exposure_report(findings_by_hotspot: Mapping[str, Iterable[LeakFinding]], db) -> dict[str, int]:
    """Distinct hotspots per receiving root organization, for MAC-address leaks
    to third parties. Domains without a known owner are keyed by themselves."""
    receivers: dict[str, set] = {}
    for hotspot, findings in findings_by_hotspot.items():
        for f in findings:
            if f.kind != "mac_address" or f.party != "third_party":
                continue
            root = db.root(f.destination)
            key = root.name if root else f.destination
            receivers.setdefault(key, set()).add(hotspot)
    return {k: len(v) for k, v in sorted(receivers.items(), key=lambda kv: (-len(kv[1]), kv[0]))}
