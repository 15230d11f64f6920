"""Adblock-syntax filter lists: parsing, indexed URL matching, tracker verdicts.

Only network rules are compiled. Element-hiding rules and comments are
counted and skipped. Supported options are ``third-party`` (and its
negation / ``first-party``), ``domain=`` and the resource types in
RESOURCE_TYPES; any other option keeps the rule but is recorded as
unsupported and treated as satisfied.
"""
from __future__ import annotations

import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import PurePosixPath
from typing import Iterable, Sequence
from urllib.parse import urlsplit

logger = logging.getLogger(__name__)

SOURCE_LABELS = ("advertising", "privacy", "social")
RESOURCE_TYPES = ("script", "image", "stylesheet", "xmlhttprequest", "subdocument", "other")
SEPARATORS = "/:?=&#"

_TOKEN_RE = re.compile(r"[a-z0-9%]+")
_OPTIONS_RE = re.compile(r"^[\w~,=|.\-*]+$")
_ELEMHIDE_MARKERS = ("##", "#@#", "#?#", "#$#", "#@$#", "#%#")

_TYPE_ALIASES = {
    "script": "script", "image": "image", "stylesheet": "stylesheet", "css": "stylesheet",
    "xmlhttprequest": "xmlhttprequest", "xhr": "xmlhttprequest", "subdocument": "subdocument",
    "frame": "subdocument", "other": "other",
}


@dataclass(frozen=True)
class RequestContext:
    url: str
    third_party: bool
    resource_type: str = "other"
    initiator_host: str | None = None

    @property
    def lowered(self) -> str:
        return self.url.lower()


@dataclass(frozen=True)
class FilterRule:
    id: str
    text: str
    kind: str  # block | exception
    pattern: str
    anchor_start: str = "none"  # none | domain | start
    anchor_end: bool = False
    third_party: bool | None = None
    include_domains: tuple[str, ...] = ()
    exclude_domains: tuple[str, ...] = ()
    include_types: frozenset = frozenset()
    exclude_types: frozenset = frozenset()
    unsupported_options: tuple[str, ...] = ()
    source_label: str = "advertising"
    regex: re.Pattern = field(default=None, compare=False, repr=False)

    def options_apply(self, ctx: RequestContext) -> bool:
        if self.third_party is not None and self.third_party != ctx.third_party:
            return False
        if self.include_types and ctx.resource_type not in self.include_types:
            return False
        if ctx.resource_type in self.exclude_types:
            return False
        if self.include_domains or self.exclude_domains:
            host = (ctx.initiator_host or "").lower()
            if host and any(_domain_match(host, d) for d in self.exclude_domains):
                return False
            if self.include_domains and not (host and any(_domain_match(host, d) for d in self.include_domains)):
                return False
        return True

    def matches(self, ctx: RequestContext, lowered: str | None = None) -> bool:
        url = lowered if lowered is not None else ctx.lowered
        return self.regex.search(url) is not None and self.options_apply(ctx)


def _domain_match(host: str, domain: str) -> bool:
    return host == domain or host.endswith("." + domain)


def _pattern_regex(pattern: str, anchor_start: str, anchor_end: bool) -> re.Pattern:
    parts = []
    if anchor_start == "domain":
        parts.append(r"^[a-z][a-z0-9+.\-]*://(?:[^/?#]*\.)?")
    elif anchor_start == "start":
        parts.append("^")
    for ch in pattern:
        if ch == "*":
            parts.append(".*")
        elif ch == "^":
            parts.append(r"(?:[/:?=&#]|$)")
        else:
            parts.append(re.escape(ch))
    if anchor_end:
        parts.append("$")
    return re.compile("".join(parts), re.DOTALL)


class RuleSyntaxError(ValueError):
    pass


def parse_rule(line: str, rule_id: str, source_label: str) -> FilterRule:
    text = line
    kind = "block"
    if line.startswith("@@"):
        kind, line = "exception", line[2:]
    if len(line) > 1 and line.startswith("/") and line.endswith("/"):
        raise RuleSyntaxError("regular-expression rules are not supported")
    options = ""
    dollar = line.rfind("$")
    if dollar >= 0 and _OPTIONS_RE.match(line[dollar + 1:] or "-"):
        line, options = line[:dollar], line[dollar + 1:]
    anchor_start, anchor_end = "none", False
    if line.startswith("||"):
        anchor_start, line = "domain", line[2:]
    elif line.startswith("|"):
        anchor_start, line = "start", line[1:]
    if line.endswith("|"):
        anchor_end, line = True, line[:-1]
    if anchor_start == "none":
        line = line.lstrip("*")
    if not anchor_end:
        line = line.rstrip("*")
    pattern = line.lower()
    if "|" in pattern or any(c.isspace() for c in pattern):
        raise RuleSyntaxError(f"unexpected character in pattern {pattern!r}")

    third_party = None
    seen_domain = False
    inc_dom, exc_dom, inc_types, exc_types, unsupported = [], [], set(), set(), []
    for opt in filter(None, options.split(",")):
        neg = opt.startswith("~")
        name = opt[1:] if neg else opt
        name_l = name.lower()
        if name_l in ("third-party", "3p", "first-party", "1p"):
            wanted = (not neg) if name_l in ("third-party", "3p") else neg
            if third_party is not None and third_party != wanted:
                raise RuleSyntaxError(f"conflicting party options in {options!r}")
            third_party = wanted
        elif name_l.startswith("domain="):
            if seen_domain:
                raise RuleSyntaxError("repeated domain= option")
            seen_domain = True
            for d in filter(None, name[7:].lower().split("|")):
                (exc_dom if d.startswith("~") else inc_dom).append(d.lstrip("~"))
        elif name_l in _TYPE_ALIASES:
            (exc_types if neg else inc_types).add(_TYPE_ALIASES[name_l])
        else:
            unsupported.append(opt)
    if not pattern and not options:
        raise RuleSyntaxError("empty rule")
    return FilterRule(
        id=rule_id, text=text, kind=kind, pattern=pattern, anchor_start=anchor_start,
        anchor_end=anchor_end, third_party=third_party, include_domains=tuple(inc_dom),
        exclude_domains=tuple(exc_dom), include_types=frozenset(inc_types),
        exclude_types=frozenset(exc_types), unsupported_options=tuple(unsupported),
        source_label=source_label, regex=_pattern_regex(pattern, anchor_start, anchor_end),
    )


def rule_keyword(rule: FilterRule) -> str | None:
    """Longest pattern token guaranteed to appear as a whole URL token when the rule matches."""
    best = None
    pat = rule.pattern
    for m in _TOKEN_RE.finditer(pat):
        start, end = m.span()
        if start == 0:
            left_ok = rule.anchor_start != "none"
        else:
            left_ok = pat[start - 1] != "*"
        if end == len(pat):
            right_ok = rule.anchor_end
        else:
            right_ok = pat[end] != "*"
        if left_ok and right_ok and (best is None or len(m.group()) > len(best)):
            best = m.group()
    return best


class _RuleIndex:
    def __init__(self, rules: Iterable[FilterRule]):
        self.by_token: dict[str, list[FilterRule]] = defaultdict(list)
        self.fallback: list[FilterRule] = []
        for rule in rules:
            kw = rule_keyword(rule)
            (self.by_token[kw] if kw else self.fallback).append(rule)

    def first_match(self, ctx: RequestContext, lowered: str, tokens: set[str]) -> FilterRule | None:
        hits = []
        for tok in tokens:
            for rule in self.by_token.get(tok, ()):
                if rule.matches(ctx, lowered):
                    hits.append(rule)
        for rule in self.fallback:
            if rule.matches(ctx, lowered):
                hits.append(rule)
        # lowest rule id wins so the result does not depend on set iteration order
        return min(hits, key=_rule_order) if hits else None


def _rule_order(rule: FilterRule):
    label, _, num = rule.id.rpartition(":")
    return (label, int(num) if num.isdigit() else 0, rule.id)


@dataclass(frozen=True)
class Match:
    block: FilterRule | None
    exception: FilterRule | None

    @property
    def blocked(self) -> bool:
        return self.block is not None and self.exception is None


class CompiledFilterSet:
    def __init__(self, rules: Sequence[FilterRule] = (), label: str = "advertising", name: str = "",
                 skipped: int = 0, diagnostics: Sequence[str] = (), version: str | None = None):
        self.rules = list(rules)
        self.label = label
        self.name = name or label
        self.skipped = skipped
        self.diagnostics = list(diagnostics)
        self.version = version
        self.block_rules = [r for r in self.rules if r.kind == "block"]
        self.exception_rules = [r for r in self.rules if r.kind == "exception"]
        self._blocks = _RuleIndex(self.block_rules)
        self._exceptions = _RuleIndex(self.exception_rules)

    def __len__(self):
        return len(self.rules)

    def match(self, ctx: RequestContext) -> Match:
        lowered = ctx.lowered
        tokens = set(_TOKEN_RE.findall(lowered))
        block = self._blocks.first_match(ctx, lowered, tokens)
        if block is None:
            return Match(None, None)
        return Match(block, self._exceptions.first_match(ctx, lowered, tokens))


def parse_filter_list(text: str, source_label: str, name: str = "") -> CompiledFilterSet:
    if source_label not in SOURCE_LABELS:
        raise ValueError(f"source_label must be one of {SOURCE_LABELS}")
    rules, diagnostics = [], []
    skipped = 0
    version = None
    prefix = name or source_label
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("!") or line.startswith("[") and line.endswith("]"):
            if version is None and line.lower().startswith("! version:"):
                version = line.split(":", 1)[1].strip()
            skipped += 1
            continue
        if any(marker in line for marker in _ELEMHIDE_MARKERS):
            skipped += 1
            continue
        try:
            rules.append(parse_rule(line, f"{prefix}:{lineno}", source_label))
        except RuleSyntaxError as exc:
            skipped += 1
            diagnostics.append(f"{prefix}:{lineno}: {exc}")
    if diagnostics:
        logger.info("%s: %d malformed rule(s) skipped", prefix, len(diagnostics))
    return CompiledFilterSet(rules, source_label, prefix, skipped, diagnostics, version)


# -- request context -------------------------------------------------------

_EXT_TYPES = {
    ".js": "script", ".mjs": "script",
    ".png": "image", ".jpg": "image", ".jpeg": "image", ".gif": "image", ".webp": "image",
    ".svg": "image", ".ico": "image", ".bmp": "image",
    ".css": "stylesheet",
}
_DEST_TYPES = {
    "script": "script", "image": "image", "style": "stylesheet", "iframe": "subdocument",
    "frame": "subdocument", "empty": "xmlhttprequest",
}


def infer_resource_type(tx) -> str:
    dest = next(iter(tx.request_header("sec-fetch-dest")), "").lower()
    if dest in _DEST_TYPES:
        return _DEST_TYPES[dest]
    ext = PurePosixPath(urlsplit(tx.url).path).suffix.lower()
    if ext in _EXT_TYPES:
        return _EXT_TYPES[ext]
    if any(v.lower() == "xmlhttprequest" for v in tx.request_header("x-requested-with")):
        return "xmlhttprequest"
    accept = ",".join(tx.request_header("accept")).lower()
    if accept.startswith("text/css"):
        return "stylesheet"
    if accept.startswith("image/"):
        return "image"
    if "javascript" in accept:
        return "script"
    if accept.startswith("application/json"):
        return "xmlhttprequest"
    if accept.startswith("text/html") and tx.initiator_page and tx.initiator_page != tx.url:
        return "subdocument"
    return "other"


def request_context(tx, party) -> RequestContext:
    initiator = urlsplit(tx.initiator_page).hostname if tx.initiator_page else None
    return RequestContext(url=tx.url, third_party=party.third_party,
                          resource_type=infer_resource_type(tx), initiator_host=initiator)


def match_request(tx, party, filter_set: CompiledFilterSet) -> FilterRule | None:
    """Blocking rule for the transaction, or None (no match, or suppressed by an exception)."""
    m = filter_set.match(request_context(tx, party))
    return m.block if m.blocked else None


# -- tracker verdicts ------------------------------------------------------

SIGNALS = ("sets_persistent_cookie", "receives_persistent_cookie", "receives_identifier_leak")


@dataclass(frozen=True)
class DomainSummary:
    registrable_domain: str
    third_party: bool
    transactions: tuple = ()  # (HttpTransaction, PartyVerdict) pairs


@dataclass(frozen=True)
class TrackerVerdict:
    domain: str
    status: str  # known_tracker | possible_tracker | non_tracker
    labels: tuple[str, ...] = ()
    evidence: tuple[str, ...] = ()

    def to_dict(self):
        return {"domain": self.domain, "status": self.status,
                "labels": list(self.labels), "evidence": list(self.evidence)}


def classify_tracker(summary: DomainSummary, filter_sets: Sequence[CompiledFilterSet],
                     signals: Iterable[str] = ()) -> TrackerVerdict:
    domain = summary.registrable_domain
    if not summary.third_party:
        return TrackerVerdict(domain, "non_tracker")
    labels, evidence = set(), set()
    for tx, party in summary.transactions:
        ctx = request_context(tx, party)
        for fs in filter_sets:
            m = fs.match(ctx)
            if m.blocked:
                labels.add(fs.label)
                evidence.add(m.block.id)
    if labels:
        return TrackerVerdict(domain, "known_tracker", tuple(sorted(labels)), tuple(sorted(evidence)))
    sig = sorted(set(signals) & set(SIGNALS))
    if sig:
        return TrackerVerdict(domain, "possible_tracker", (), tuple(sig))
    return TrackerVerdict(domain, "non_tracker")
