"""Registrable domains, first/third-party classification and ownership chains."""
from __future__ import annotations

import functools
import ipaddress
import json
import logging
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, NamedTuple, Protocol

logger = logging.getLogger(__name__)

_LABEL_RE = re.compile(r"^[^\s/\\!*]+$")


class DomainError(ValueError):
    pass


class OwnershipError(ValueError):
    pass


def _to_unicode(label: str) -> str:
    if label.startswith("xn--"):
        try:
            return label.encode("ascii").decode("idna").lower()
        except UnicodeError:
            return label
    return label


def _normalize_host(host: str) -> str:
    host = host.strip().lower()
    if host.endswith("."):
        host = host[:-1]
    return host


def is_ip_literal(host: str) -> bool:
    try:
        ipaddress.ip_address(host.strip("[]"))
    except ValueError:
        return False
    return True


class DomainParts(NamedTuple):
    host: str
    suffix: str
    registrable: str
    suffix_only: bool


@dataclass(frozen=True)
class SuffixRuleSet:
    """Public-suffix rules, keyed by their unicode label string."""

    normal: frozenset = frozenset()
    wildcard: frozenset = frozenset()   # "*.ck" stored as "ck"
    exception: frozenset = frozenset()  # "!www.ck" stored as "www.ck"
    skipped: int = 0
    version: str | None = None

    def __len__(self):
        return len(self.normal) + len(self.wildcard) + len(self.exception)

    def suffix_length(self, labels: list[str]) -> int:
        """Number of trailing labels forming the public suffix."""
        n = len(labels)
        keys = [".".join(labels[i:]) for i in range(n)]
        for i, key in enumerate(keys):
            if key in self.exception:
                return n - i - 1
        for i, key in enumerate(keys):
            if key in self.normal:
                return n - i
            if i + 1 < n and keys[i + 1] in self.wildcard:
                return n - i
        return 1

    def split(self, host: str) -> DomainParts:
        host = _normalize_host(host)
        if not host:
            raise DomainError("empty host")
        if is_ip_literal(host):
            return DomainParts(host, "", host, False)
        labels = host.split(".")
        if any(not label for label in labels):
            raise DomainError(f"empty label in host {host!r}")
        k = self.suffix_length([_to_unicode(x) for x in labels])
        suffix = ".".join(labels[-k:])
        if k >= len(labels):
            return DomainParts(host, suffix, host, True)
        return DomainParts(host, suffix, ".".join(labels[-k - 1:]), False)

    def public_suffix(self, host: str) -> str:
        return self.split(host).suffix


def parse_psl(text: str) -> SuffixRuleSet:
    normal, wildcard, exception = set(), set(), set()
    skipped = 0
    version = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("//"):
            if version is None and line.startswith("// VERSION:"):
                version = line.split(":", 1)[1].strip()
            continue
        rule = line.split()[0].lower()
        target = normal
        if rule.startswith("!"):
            target, rule = exception, rule[1:]
        elif rule.startswith("*."):
            target, rule = wildcard, rule[2:]
        labels = rule.split(".")
        if not rule or any(not label or not _LABEL_RE.match(label) for label in labels):
            skipped += 1
            continue
        target.add(".".join(_to_unicode(x) for x in labels))
    if skipped:
        logger.warning("public suffix list: %d unparseable line(s) skipped", skipped)
    return SuffixRuleSet(frozenset(normal), frozenset(wildcard), frozenset(exception), skipped, version)


def load_psl(path: str | os.PathLike | None = None) -> SuffixRuleSet:
    if path is None:
        return default_psl()
    return parse_psl(Path(path).read_text(encoding="utf-8"))


@functools.lru_cache(maxsize=1)
def default_psl() -> SuffixRuleSet:
    text = resources.files("cpaudit.data").joinpath("public_suffix_list.dat").read_text(encoding="utf-8")
    return parse_psl(text)


def registrable_domain(host: str, rules: SuffixRuleSet | None = None) -> str:
    """Public suffix plus one label. A host that is itself a suffix comes back unchanged;
    use ``SuffixRuleSet.split`` to see the ``suffix_only`` flag."""
    return (rules or default_psl()).split(host).registrable


# -- ownership -------------------------------------------------------------

class Organization(NamedTuple):
    id: str
    name: str


class OwnershipClient(Protocol):
    """Live lookup (WHOIS, registries...). Returns an organization id known to the db."""

    def lookup(self, registrable_domain: str) -> str | None: ...


@dataclass(frozen=True)
class OwnershipDb:
    domain_to_org: Mapping[str, str] = field(default_factory=dict)
    org_parent: Mapping[str, str | None] = field(default_factory=dict)
    org_names: Mapping[str, str] = field(default_factory=dict)
    version: str | None = None
    client: OwnershipClient | None = field(default=None, compare=False)

    def __post_init__(self):
        for dom, org in self.domain_to_org.items():
            if org not in self.org_names:
                raise OwnershipError(f"domain {dom} maps to unknown organization {org!r}")
        for org, parent in self.org_parent.items():
            if parent is not None and parent not in self.org_names:
                raise OwnershipError(f"organization {org} has unknown parent {parent!r}")
        for org in self.org_names:
            seen = [org]
            cur = self.org_parent.get(org)
            while cur is not None:
                if cur in seen:
                    raise OwnershipError("ownership cycle: " + " -> ".join(seen + [cur]))
                seen.append(cur)
                cur = self.org_parent.get(cur)

    @classmethod
    def from_dict(cls, d: Mapping) -> OwnershipDb:
        orgs = d.get("orgs", {})
        return cls(
            domain_to_org={k.lower(): v for k, v in d.get("domains", {}).items()},
            org_parent={k: v.get("parent") for k, v in orgs.items()},
            org_names={k: v.get("name", k) for k, v in orgs.items()},
            version=d.get("version"),
        )

    def org_of(self, registrable: str) -> str | None:
        org = self.domain_to_org.get(registrable.lower())
        if org is None and self.client is not None:
            org = self.client.lookup(registrable.lower())
            if org is not None and org not in self.org_names:
                org = None
        return org

    def chain(self, registrable: str) -> list[Organization]:
        out = []
        org = self.org_of(registrable)
        while org is not None:
            out.append(Organization(org, self.org_names[org]))
            org = self.org_parent.get(org)
        return out

    def root(self, registrable: str) -> Organization | None:
        chain = self.chain(registrable)
        return chain[-1] if chain else None


def load_ownership(path: str | os.PathLike | None = None) -> OwnershipDb:
    if path is None:
        text = resources.files("cpaudit.data").joinpath("ownership.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return OwnershipDb.from_dict(json.loads(text))


def resolve_owner(registrable: str, db: OwnershipDb) -> list[Organization]:
    """Owning organization chain, leaf first; [] for unknown domains."""
    return db.chain(registrable)


# -- party classification --------------------------------------------------

@dataclass(frozen=True)
class PartyVerdict:
    domain: str
    registrable_domain: str
    party: str  # first_party | third_party
    owner_org: str | None = None

    @property
    def third_party(self) -> bool:
        return self.party == "third_party"


def classify_party(host: str, meta, db: OwnershipDb, rules: SuffixRuleSet | None = None) -> PartyVerdict:
    return PartyClassifier(meta.owner_domains, db, rules)(host)


class PartyClassifier:
    """Memoized classify_party for one set of owner domains."""

    def __init__(self, owner_domains, db: OwnershipDb, rules: SuffixRuleSet | None = None):
        self.rules = rules or default_psl()
        self.db = db
        self.owners = frozenset(self.rules.split(d).registrable for d in owner_domains)
        self.owner_roots = frozenset(
            r.id for r in (db.root(d) for d in self.owners) if r is not None)
        self._cache: dict[str, PartyVerdict] = {}

    def registrable(self, host: str) -> str:
        return self.rules.split(host).registrable

    def __call__(self, host: str) -> PartyVerdict:
        host = _normalize_host(host)
        hit = self._cache.get(host)
        if hit is not None:
            return hit
        reg = self.registrable(host)
        root = self.db.root(reg)
        first = reg in self.owners or (root is not None and root.id in self.owner_roots)
        verdict = PartyVerdict(host, reg, "first_party" if first else "third_party",
                               root.id if root else None)
        self._cache[host] = verdict
        return verdict
