"""Per-bundle analysis, per-hotspot aggregation, and the derived reports.

Hotspot reports follow distinct-union semantics: a tracker, cookie or
fingerprinting attribute seen in several datasets of the same hotspot is
counted once. Every count in a report is emitted next to the evidence list
it was computed from.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import __version__
from .bundle import CaptureBundle, PAGE_TYPES
from .config import DEFAULT_THRESHOLDS, ConfigError, RunConfig, Thresholds, file_digest
from .cookies import BUCKETS, CookieAnalysis, analyze_cookie, distinct_cookies, extract_cookies, pre_consent_report
from .domains import (DomainError, OwnershipDb, PartyClassifier, SuffixRuleSet, default_psl, load_ownership,
                      load_psl)
from .filters import (SOURCE_LABELS, CompiledFilterSet, DomainSummary, TrackerVerdict, classify_tracker,
                      parse_filter_list, request_context)
from .fingerprint import CATEGORIES, ApiCatalog, FingerprintFinding, aggregate_fingerprints, load_catalog, \
    scan_bundle_scripts
from .pii import LeakFinding, PiiProfile, compile_needles, load_profile, scan_bundle

logger = logging.getLogger(__name__)

SCHEMA = "cpaudit.hotspot-report/1"
FORMATS = ("json", "csv", "text")
PARTIES = ("first", "third")


class ReportError(ValueError):
    pass


# -- inputs ----------------------------------------------------------------

@dataclass
class AuditInputs:
    filter_sets: list[CompiledFilterSet] = field(default_factory=list)
    psl: SuffixRuleSet | None = None
    owners: OwnershipDb = field(default_factory=OwnershipDb)
    catalog: ApiCatalog | None = None
    profile: PiiProfile | None = None
    thresholds: Thresholds = DEFAULT_THRESHOLDS
    versions: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> AuditInputs:
        cfg.check_paths()
        versions: dict = {"tool": __version__}

        def guarded(path, loader):
            try:
                return loader(path)
            except (OSError, ValueError, KeyError) as exc:
                raise ConfigError(f"cannot load {path}: {exc}") from exc

        filter_sets = []
        lists = []
        for label, path in cfg.filters:
            if label not in SOURCE_LABELS:
                raise ConfigError(f"filter label {label!r} must be one of {', '.join(SOURCE_LABELS)}")
            fs = guarded(path, lambda p: parse_filter_list(Path(p).read_text(encoding="utf-8"), label,
                                                           name=Path(p).name))
            filter_sets.append(fs)
            lists.append({"label": label, "name": fs.name, "version": fs.version, "rules": len(fs),
                          "skipped": fs.skipped, "sha256": file_digest(path)})
        versions["filter_lists"] = lists
        psl = guarded(cfg.psl, load_psl) if cfg.psl else default_psl()
        versions["psl"] = {"version": psl.version, "rules": len(psl),
                           "sha256": file_digest(cfg.psl) if cfg.psl else None}
        owners = guarded(cfg.owners, load_ownership) if cfg.owners else load_ownership()
        versions["ownership_db"] = owners.version
        catalog = guarded(cfg.catalog, load_catalog) if cfg.catalog else load_catalog()
        versions["api_catalog"] = {"version": catalog.version, "entries": len(catalog)}
        profile = guarded(cfg.pii, load_profile) if cfg.pii else None
        versions["thresholds"] = cfg.thresholds.to_dict()
        return cls(filter_sets, psl, owners, catalog, profile, cfg.thresholds, versions)

    def classifier(self, meta) -> PartyClassifier:
        return PartyClassifier(meta.owner_domains, self.owners, self.psl)


# -- per-bundle analysis ---------------------------------------------------

@dataclass
class BundleAnalysis:
    meta: object
    third_party_domains: list[str]
    trackers: dict[str, TrackerVerdict]
    cookies: list[CookieAnalysis]
    unparsed_cookies: int
    fingerprints: list[FingerprintFinding]
    leaks: list[LeakFinding]
    blocked_domains: list[str]


def _signals(bundle, classifier, analyses: Sequence[CookieAnalysis], leaks, thresholds) -> dict[str, set]:
    signals: dict[str, set] = defaultdict(set)
    persistent_names: dict[str, set] = defaultdict(set)
    for a in analyses:
        if a.persistent and a.party == "third":
            signals[a.registrable_domain].add("sets_persistent_cookie")
            persistent_names[a.registrable_domain].add(a.record.name)
    for tx in bundle.transactions:
        reg = classifier(tx.host).registrable_domain
        names = persistent_names.get(reg)
        if not names:
            continue
        for header in tx.request_header("cookie"):
            sent = {p.split("=", 1)[0].strip() for p in header.split(";")}
            if sent & names:
                signals[reg].add("receives_persistent_cookie")
    for f in leaks:
        signals[f.destination].add("receives_identifier_leak")
    return signals


def analyze_bundle(bundle: CaptureBundle, inputs: AuditInputs, profile: PiiProfile | None = None) -> BundleAnalysis:
    profile = profile or inputs.profile
    th = inputs.thresholds
    classify = inputs.classifier(bundle.meta)
    needles = compile_needles(profile, th.pii_min_length) if profile else []

    extracted = extract_cookies(bundle)
    cookies = []
    for rec in extracted:
        try:
            cookies.append(analyze_cookie(rec, bundle.meta, classifier=classify, needles=needles, thresholds=th))
        except DomainError as exc:
            logger.warning("cookie %s on %r skipped: %s", rec.name, rec.domain, exc)

    leaks = scan_bundle(bundle, profile, classify, min_length=th.pii_min_length) if profile else []

    by_domain: dict[str, list] = defaultdict(list)
    for tx in bundle.transactions:
        verdict = classify(tx.host)
        by_domain[verdict.registrable_domain].append((tx, verdict))
    signals = _signals(bundle, classify, cookies, leaks, th)
    trackers = {}
    for dom in sorted(by_domain):
        pairs = by_domain[dom]
        summary = DomainSummary(dom, pairs[0][1].third_party, tuple(pairs))
        trackers[dom] = classify_tracker(summary, inputs.filter_sets, signals.get(dom, ()))
    third = sorted(d for d, pairs in by_domain.items() if pairs[0][1].third_party)
    status = {d: v.status for d, v in trackers.items()}
    leaks = [_with_status(f, status) for f in leaks]

    fps = scan_bundle_scripts(bundle, inputs.catalog, classify, th.font_min_names) if inputs.catalog else []
    blocked = sorted(d for d, v in trackers.items() if v.status == "known_tracker")
    return BundleAnalysis(bundle.meta, third, trackers, cookies, len(extracted.raw), fps, leaks, blocked)


def _with_status(f: LeakFinding, status: Mapping[str, str]) -> LeakFinding:
    from dataclasses import replace
    return replace(f, tracker_status=status.get(f.destination, "non_tracker"))


# -- hotspot aggregation ---------------------------------------------------

def _cookie_key(identity) -> str:
    return f"{identity.domain}|{identity.name}|{identity.path}"


def _leak_key(f: LeakFinding) -> tuple:
    return (f.kind, f.encoding, f.channel, f.destination, f.transport)


@dataclass
class PageSection:
    datasets: int = 0
    third_party_domains: list[str] = field(default_factory=list)
    known_trackers: list[str] = field(default_factory=list)
    known_by_label: dict[str, list[str]] = field(default_factory=lambda: {k: [] for k in SOURCE_LABELS})
    possible_trackers: list[str] = field(default_factory=list)
    cookies: dict[str, dict[str, list[str]]] = field(
        default_factory=lambda: {p: {b: [] for b in BUCKETS} for p in PARTIES})
    pre_consent_cookies: list[dict] | None = None  # None: no consent marker, not evaluable
    fingerprint: dict[str, list[str]] = field(default_factory=dict)
    fingerprint_pre_consent: dict[str, list[str]] = field(default_factory=dict)
    leaks: list[dict] = field(default_factory=list)
    mac_destinations: list[str] = field(default_factory=list)
    persistent_cookie_trackers: list[str] = field(default_factory=list)

    @property
    def fingerprint_total(self) -> int:
        return sum(len(v) for v in self.fingerprint.values())

    @property
    def fingerprint_pre_consent_total(self) -> int:
        return sum(len(v) for v in self.fingerprint_pre_consent.values())

    def to_dict(self) -> dict:
        def ev(items):
            return {"count": len(items), "items": list(items)}

        return {
            "datasets": self.datasets,
            "third_party_domains": ev(self.third_party_domains),
            "known_trackers": {**ev(self.known_trackers),
                               "by_label": {k: ev(v) for k, v in self.known_by_label.items()}},
            "possible_trackers": ev(self.possible_trackers),
            "cookies": {p: {b: ev(v) for b, v in bs.items()} for p, bs in self.cookies.items()},
            "pre_consent_cookies": ({"evaluable": False, "count": None, "items": []}
                                    if self.pre_consent_cookies is None
                                    else {"evaluable": True, **ev(self.pre_consent_cookies)}),
            "fingerprint": {
                "total": self.fingerprint_total,
                "by_category": {k: ev(v) for k, v in self.fingerprint.items()},
                "pre_consent_total": self.fingerprint_pre_consent_total,
                "pre_consent_by_category": {k: ev(v) for k, v in self.fingerprint_pre_consent.items()},
            },
            "leaks": ev(self.leaks),
            "mac_destinations": ev(self.mac_destinations),
            "persistent_cookie_trackers": ev(self.persistent_cookie_trackers),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> PageSection:
        pre = d["pre_consent_cookies"]
        return cls(
            datasets=d["datasets"],
            third_party_domains=d["third_party_domains"]["items"],
            known_trackers=d["known_trackers"]["items"],
            known_by_label={k: v["items"] for k, v in d["known_trackers"]["by_label"].items()},
            possible_trackers=d["possible_trackers"]["items"],
            cookies={p: {b: v["items"] for b, v in bs.items()} for p, bs in d["cookies"].items()},
            pre_consent_cookies=pre["items"] if pre["evaluable"] else None,
            fingerprint={k: v["items"] for k, v in d["fingerprint"]["by_category"].items()},
            fingerprint_pre_consent={k: v["items"] for k, v in d["fingerprint"]["pre_consent_by_category"].items()},
            leaks=d["leaks"]["items"],
            mac_destinations=d["mac_destinations"]["items"],
            persistent_cookie_trackers=d["persistent_cookie_trackers"]["items"],
        )

    def metrics(self) -> list[tuple[str, object]]:
        rows: list[tuple[str, object]] = [
            ("datasets", self.datasets),
            ("third_party_domains", len(self.third_party_domains)),
            ("known_trackers", len(self.known_trackers)),
        ]
        rows += [(f"known_trackers.{k}", len(v)) for k, v in self.known_by_label.items()]
        rows.append(("possible_trackers", len(self.possible_trackers)))
        for p in PARTIES:
            rows += [(f"cookies.{p}_party.{b}", len(self.cookies[p][b])) for b in BUCKETS]
        rows.append(("pre_consent_cookies",
                     "not_evaluable" if self.pre_consent_cookies is None else len(self.pre_consent_cookies)))
        rows += [(f"fingerprint.{c}", len(self.fingerprint.get(c, ()))) for c in CATEGORIES]
        rows.append(("fingerprint.total", self.fingerprint_total))
        rows.append(("fingerprint.pre_consent_total", self.fingerprint_pre_consent_total))
        rows.append(("leaks", len(self.leaks)))
        rows.append(("leaks.plaintext_http", sum(1 for x in self.leaks if x["transport"] == "plaintext_http")))
        rows.append(("mac_destinations", len(self.mac_destinations)))
        rows.append(("persistent_cookie_trackers", len(self.persistent_cookie_trackers)))
        return rows


@dataclass
class HotspotReport:
    hotspot_id: str
    owner_domains: list[str]
    sections: dict[str, PageSection]
    inputs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "hotspot_id": self.hotspot_id,
            "owner_domains": list(self.owner_domains),
            "pages": {k: v.to_dict() for k, v in self.sections.items()},
            "inputs": self.inputs,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> HotspotReport:
        if d.get("schema") != SCHEMA:
            raise ReportError(f"unsupported report schema {d.get('schema')!r}")
        return cls(d["hotspot_id"], list(d["owner_domains"]),
                   {k: PageSection.from_dict(v) for k, v in d["pages"].items()}, d.get("inputs", {}))

    def metrics(self) -> list[tuple[str, str, object]]:
        return [(page, name, value) for page, sec in self.sections.items() for name, value in sec.metrics()]


def _section(analyses: Sequence[BundleAnalysis]) -> PageSection:
    sec = PageSection(datasets=len(analyses))
    third, known, possible = set(), set(), set()
    by_label = {k: set() for k in SOURCE_LABELS}
    for a in analyses:
        third.update(a.third_party_domains)
        for dom, v in a.trackers.items():
            if v.status == "known_tracker":
                known.add(dom)
                for label in v.labels:
                    by_label[label].add(dom)
            elif v.status == "possible_tracker":
                possible.add(dom)
    sec.third_party_domains = sorted(third)
    sec.known_trackers = sorted(known)
    sec.known_by_label = {k: sorted(v) for k, v in by_label.items()}
    sec.possible_trackers = sorted(possible - known)

    cookies = distinct_cookies(c for a in analyses for c in a.cookies)
    for ident, c in cookies.items():
        sec.cookies[c.party][c.bucket].append(_cookie_key(ident))
    evaluable = [a for a in analyses if a.meta.consent_at is not None]
    if evaluable:
        pre = {}
        for a in evaluable:
            summary = pre_consent_report(a.cookies, a.meta)
            for ident, life in summary.cookies:
                key = _cookie_key(ident)
                pre[key] = max(pre.get(key, 0), life or 0)
        sec.pre_consent_cookies = [{"cookie": k, "lifetime_seconds": v} for k, v in sorted(pre.items())]

    fp = aggregate_fingerprints(f for a in analyses for f in a.fingerprints)
    sec.fingerprint = fp.attributes
    sec.fingerprint_pre_consent = fp.pre_consent

    leaks = {}
    for a in analyses:
        for f in a.leaks:
            leaks.setdefault(_leak_key(f), f)
    sec.leaks = [
        {"kind": f.kind, "encoding": f.encoding, "channel": f.channel, "destination": f.destination,
         "transport": f.transport, "party": f.party, "tracker_status": f.tracker_status, "url": f.url}
        for _, f in sorted(leaks.items())
    ]
    sec.mac_destinations = sorted({f.destination for a in analyses for f in a.leaks
                                   if f.kind == "mac_address" and f.party == "third_party"})
    trackers = known | possible
    sec.persistent_cookie_trackers = sorted({c.registrable_domain for c in cookies.values()
                                             if c.persistent and c.party == "third"
                                             and c.registrable_domain in trackers})
    return sec


def aggregate_hotspot(analyses: Iterable[BundleAnalysis],
                      inputs: Mapping | AuditInputs | None = None) -> HotspotReport:
    """Union per-dataset analyses of one hotspot; ``inputs`` supplies the recorded input versions."""
    if isinstance(inputs, AuditInputs):
        inputs = inputs.versions
    analyses = list(analyses)
    if not analyses:
        raise ReportError("no analyses to aggregate")
    ids = {a.meta.hotspot_id for a in analyses}
    if len(ids) != 1:
        raise ReportError(f"bundles from several hotspots: {', '.join(sorted(ids))}")
    owners = {frozenset(a.meta.owner_domains) for a in analyses}
    if len(owners) != 1:
        raise ReportError(f"conflicting owner_domains for hotspot {ids.pop()}")
    # order-independent: sort datasets by a stable key before the union
    analyses.sort(key=lambda a: (a.meta.page_type, a.meta.browser_label, a.meta.browsing_mode,
                                 a.meta.collected_at))
    sections = {}
    for page in PAGE_TYPES:
        group = [a for a in analyses if a.meta.page_type == page]
        if group:
            sections[page] = _section(group)
    return HotspotReport(ids.pop(), sorted(owners.pop()), sections, dict(inputs or {}))


def corpus_summary(reports: Iterable[HotspotReport]) -> dict:
    """Averages and maxima across hotspots, per page type."""
    per_page: dict[str, list[tuple[str, PageSection]]] = defaultdict(list)
    for r in reports:
        for page, sec in r.sections.items():
            per_page[page].append((r.hotspot_id, sec))
    out = {}
    for page in PAGE_TYPES:
        rows = sorted(per_page.get(page, []))
        if not rows:
            continue
        stats = {}
        for name, fn in (
            ("third_party_domains", lambda s: len(s.third_party_domains)),
            ("known_trackers", lambda s: len(s.known_trackers)),
            ("third_party_persistent_cookies",
             lambda s: sum(len(v) for b, v in s.cookies["third"].items() if b != "session")),
            ("fingerprint_attributes", lambda s: s.fingerprint_total),
        ):
            values = [(fn(sec), hid) for hid, sec in rows]
            top = max(values, key=lambda v: (v[0], v[1]))
            stats[name] = {"avg": round(sum(v for v, _ in values) / len(values), 2),
                           "max": top[0], "max_hotspot": top[1]}
        stats["hotspots"] = len(rows)
        stats["hotspots_with_pre_consent_cookies"] = sum(
            1 for _, s in rows if s.pre_consent_cookies)
        stats["hotspots_fingerprinting"] = sum(1 for _, s in rows if s.fingerprint_total)
        stats["hotspots_fingerprinting_pre_consent"] = sum(1 for _, s in rows if s.fingerprint_pre_consent_total)
        out[page] = stats
    return out


# -- anti-tracking comparison ----------------------------------------------

@dataclass(frozen=True)
class UnblockedSummary:
    hotspot_id: str
    page_type: str
    browsing_mode: str
    domains: tuple[str, ...]

    @property
    def count(self) -> int:
        return len(self.domains)

    def to_dict(self):
        return {"hotspot_id": self.hotspot_id, "page_type": self.page_type,
                "browsing_mode": self.browsing_mode, "count": self.count, "domains": list(self.domains)}


def _blacklisted_domains(bundle, filter_sets, classify) -> set[str]:
    out = set()
    for tx in bundle.transactions:
        verdict = classify(tx.host)
        ctx = request_context(tx, verdict)
        if any(fs.match(ctx).blocked for fs in filter_sets):
            out.add(verdict.registrable_domain)
    return out


def anti_tracking_diff(default: CaptureBundle, protected: CaptureBundle,
                       filter_sets: Sequence[CompiledFilterSet], db: OwnershipDb | None = None,
                       rules: SuffixRuleSet | None = None, thresholds: Thresholds = DEFAULT_THRESHOLDS
                       ) -> UnblockedSummary:
    """Tracker domains that survived an anti-tracking configuration: contacted
    with a blacklisted request, or setting a persistent cookie while being a
    blacklisted domain in either capture."""
    if default.meta.hotspot_id != protected.meta.hotspot_id:
        raise ReportError(f"hotspot mismatch: {default.meta.hotspot_id} vs {protected.meta.hotspot_id}")
    if default.meta.page_type != protected.meta.page_type:
        raise ReportError("page_type mismatch between default and protected captures")
    if protected.meta.browsing_mode == "default":
        raise ReportError("protected capture has browsing_mode 'default'")
    db = db or OwnershipDb()
    classify = PartyClassifier(protected.meta.owner_domains, db, rules)
    listed = _blacklisted_domains(protected, filter_sets, classify)
    known = listed | _blacklisted_domains(default, filter_sets,
                                          PartyClassifier(default.meta.owner_domains, db, rules))
    survivors = set(listed)
    for rec in extract_cookies(protected):
        c = analyze_cookie(rec, protected.meta, classifier=classify, thresholds=thresholds)
        if c.persistent and c.party == "third" and c.registrable_domain in known:
            survivors.add(c.registrable_domain)
    m = protected.meta
    return UnblockedSummary(m.hotspot_id, m.page_type, m.browsing_mode, tuple(sorted(survivors)))


# -- prevalence ------------------------------------------------------------

def tracker_domains_with_persistent_cookies(reports: Iterable[HotspotReport]) -> list[str]:
    return sorted({d for r in reports for s in r.sections.values() for d in s.persistent_cookie_trackers})


def prevalence_count(tracker_domains: Iterable[str], corpus: str | os.PathLike | Iterable[Mapping],
                     rules: SuffixRuleSet | None = None) -> dict[str, int]:
    """Occurrences of each tracker domain among observed cookie domains. Every
    record counts, including repeated (site, domain) pairs."""
    rules = rules or default_psl()
    counts = {d.lower(): 0 for d in tracker_domains}
    cache: dict[str, str | None] = {}

    def records():
        if isinstance(corpus, (str, os.PathLike)):
            with open(corpus, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if line.strip():
                        try:
                            yield json.loads(line)
                        except ValueError as exc:
                            raise ReportError(f"{corpus}:{lineno}: {exc}") from exc
        else:
            yield from corpus

    for rec in records():
        raw = rec["cookie_domain"]
        reg = cache.get(raw, "")
        if reg == "":
            try:
                reg = rules.split(raw.lstrip(".")).registrable
            except DomainError:
                reg = None
            cache[raw] = reg
        if reg in counts:
            counts[reg] += 1
    return dict(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))


# -- rendering -------------------------------------------------------------

def render(report: HotspotReport, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["hotspot_id", "page_type", "metric", "value"])
        for page, name, value in report.metrics():
            w.writerow([report.hotspot_id, page, name, value])
        return buf.getvalue()
    if fmt == "text":
        return _render_text(report)
    raise ReportError(f"unknown format {fmt!r}; expected one of {', '.join(FORMATS)}")


def parse_report(text: str) -> HotspotReport:
    return HotspotReport.from_dict(json.loads(text))


def _render_text(r: HotspotReport) -> str:
    owners = ", ".join(r.owner_domains) if r.owner_domains else "none (every domain is third-party)"
    lines = [f"Hotspot {r.hotspot_id}", f"  owner domains: {owners}"]
    for page, s in r.sections.items():
        lines.append(f"\n== {page} ({s.datasets} dataset{'s' if s.datasets != 1 else ''})")
        high, medium = [], []
        http_leaks = [x for x in s.leaks if x["transport"] == "plaintext_http"]
        if http_leaks:
            kinds = sorted({x["kind"] for x in http_leaks})
            high.append(f"PII sent over plaintext HTTP: {len(http_leaks)} ({', '.join(kinds)})")
        if s.mac_destinations:
            high.append(f"MAC address sent to {len(s.mac_destinations)} third-party domain(s): "
                        + ", ".join(s.mac_destinations))
        if s.pre_consent_cookies:
            medium.append(f"persistent cookies set before consent: {len(s.pre_consent_cookies)}")
        if s.fingerprint_pre_consent_total:
            medium.append(f"fingerprinting before consent: {s.fingerprint_pre_consent_total} attribute(s)")
        other_leaks = len(s.leaks) - len(http_leaks)
        if other_leaks:
            medium.append(f"PII shared over TLS: {other_leaks}")
        lines += [f"  [HIGH] {x}" for x in high]
        lines += [f"  [MEDIUM] {x}" for x in medium]
        labels = ", ".join(f"{k} {len(v)}" for k, v in s.known_by_label.items())
        lines.append(f"  third-party domains: {len(s.third_party_domains)}")
        lines.append(f"  known trackers: {len(s.known_trackers)} ({labels})")
        lines.append(f"  possible trackers: {len(s.possible_trackers)}")
        for p in PARTIES:
            counts = ", ".join(f"{b} {len(s.cookies[p][b])}" for b in BUCKETS)
            lines.append(f"  {p}-party cookies: {counts}")
        if s.pre_consent_cookies is None:
            lines.append("  pre-consent cookies: not evaluable (no consent marker)")
        elif not s.pre_consent_cookies:
            lines.append("  pre-consent cookies: 0")
        cats = ", ".join(f"{c} {len(v)}" for c, v in s.fingerprint.items()) or "none"
        lines.append(f"  fingerprinting attributes: {s.fingerprint_total} ({cats})")
    return "\n".join(lines) + "\n"
