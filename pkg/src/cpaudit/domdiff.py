"""Content-injection detection by diffing baseline and observed DOM trees.

Alignment is top-down and positional: children are keyed by (tag, id) when
they carry an id, else by (tag, n-th sibling of that tag). Reordered
siblings therefore show up as paired removals and additions.
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence
from urllib.parse import urljoin, urlsplit

import html5lib

from .domains import DomainError, default_psl

TEXT = "#text"
COMMENT = "#comment"
RISKY_TAGS = frozenset({"script", "iframe", "object", "embed"})
URL_ATTRS = ("src", "href")
DEFAULT_VOLATILE_ATTRS = ("nonce", "csrf")

_WS = re.compile(r"\s+")


class SelectorError(ValueError):
    pass


@dataclass(frozen=True)
class DomNode:
    tag: str
    attrs: tuple[tuple[str, str], ...] = ()
    text: str = ""
    children: tuple[DomNode, ...] = ()

    def attr(self, name: str) -> str | None:
        for k, v in self.attrs:
            if k == name:
                return v
        return None

    @property
    def is_element(self) -> bool:
        return not self.tag.startswith("#")

    def iter(self):
        yield self
        for child in self.children:
            yield from child.iter()


@dataclass(frozen=True)
class DomTree:
    root: DomNode
    url: str = ""


def _convert(elem) -> DomNode:
    tag = elem.tag
    if not isinstance(tag, str):  # html5lib etree comment
        return DomNode(COMMENT, text=elem.text or "")
    if "}" in tag:
        tag = tag.split("}", 1)[1]
    children = []
    if elem.text:
        children.append(DomNode(TEXT, text=elem.text))
    for child in elem:
        children.append(_convert(child))
        if child.tail:
            children.append(DomNode(TEXT, text=child.tail))
    attrs = tuple(sorted((str(k).split("}")[-1], str(v)) for k, v in elem.attrib.items()))
    return DomNode(tag.lower(), attrs, "", tuple(children))


def parse_html(data: bytes | str, url: str = "") -> DomTree:
    """Forgiving HTML parse (implied html/head/body, comments kept)."""
    doc = html5lib.parse(data, treebuilder="etree", namespaceHTMLElements=False)
    return DomTree(_convert(doc), url)


# -- selectors -------------------------------------------------------------

_COMPOUND_RE = re.compile(
    r"""^(?P<tag>[a-zA-Z][\w-]*|\*)?(?P<rest>(?:\#[\w-]+|\.[\w-]+|\[[\w-]+(?:=(?:"[^"]*"|'[^']*'|[^\]]*))?\])*)$""")
_PART_RE = re.compile(r"""\#([\w-]+)|\.([\w-]+)|\[([\w-]+)(?:=("[^"]*"|'[^']*'|[^\]]*))?\]""")


class Compound(NamedTuple):
    tag: str | None
    id: str | None
    classes: tuple[str, ...]
    attrs: tuple[tuple[str, str | None], ...]

    def matches(self, node: DomNode) -> bool:
        if not node.is_element:
            return False
        if self.tag and self.tag != "*" and node.tag != self.tag:
            return False
        if self.id is not None and node.attr("id") != self.id:
            return False
        if self.classes:
            have = set((node.attr("class") or "").split())
            if not set(self.classes) <= have:
                return False
        for name, value in self.attrs:
            got = node.attr(name)
            if got is None or (value is not None and got != value):
                return False
        return True


def parse_selector(text: str) -> tuple[Compound, ...]:
    parts = text.split()
    if not parts:
        raise SelectorError("empty selector")
    out = []
    for part in parts:
        m = _COMPOUND_RE.match(part)
        if not m or not (m.group("tag") or m.group("rest")):
            raise SelectorError(f"unsupported selector {text!r}")
        ident, classes, attrs = None, [], []
        for pm in _PART_RE.finditer(m.group("rest")):
            if pm.group(1):
                ident = pm.group(1)
            elif pm.group(2):
                classes.append(pm.group(2))
            else:
                val = pm.group(4)
                if val is not None and val[:1] in "\"'":
                    val = val[1:-1]
                attrs.append((pm.group(3).lower(), val))
        tag = m.group("tag")
        out.append(Compound(tag.lower() if tag else None, ident, tuple(classes), tuple(attrs)))
    return tuple(out)


def _selector_matches(sel: Sequence[Compound], node: DomNode, ancestors: Sequence[DomNode]) -> bool:
    if not sel[-1].matches(node):
        return False
    k = len(sel) - 2
    for anc in reversed(ancestors):
        if k < 0:
            break
        if sel[k].matches(anc):
            k -= 1
    return k < 0


def load_exclusions(path: str | os.PathLike) -> tuple[list[str], tuple[str, ...]]:
    """Selectors (and volatile attribute names) from JSON or a one-per-line text file."""
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith(".json"):
        raw = json.loads(text)
        selectors = list(raw.get("exclusions", []))
        volatile = tuple(raw.get("volatile_attributes", DEFAULT_VOLATILE_ATTRS))
    else:
        selectors = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        volatile = DEFAULT_VOLATILE_ATTRS
    for s in selectors:
        parse_selector(s)
    return selectors, volatile


def normalize(tree: DomTree, exclusions: Iterable[str] = (),
              volatile_attrs: Iterable[str] = DEFAULT_VOLATILE_ATTRS) -> DomTree:
    selectors = [parse_selector(s) for s in exclusions]
    volatile = frozenset(a.lower() for a in volatile_attrs)

    def walk(node: DomNode, ancestors: list) -> DomNode | None:
        if node.tag == TEXT:
            text = _WS.sub(" ", node.text).strip()
            return DomNode(TEXT, text=text) if text else None
        if node.tag == COMMENT:
            return DomNode(COMMENT, text=_WS.sub(" ", node.text).strip())
        if any(_selector_matches(s, node, ancestors) for s in selectors):
            return None
        ancestors.append(node)
        kids = tuple(k for k in (walk(c, ancestors) for c in node.children) if k is not None)
        ancestors.pop()
        attrs = tuple((k, "" if k in volatile else v) for k, v in node.attrs)
        return DomNode(node.tag, attrs, node.text, kids)

    root = walk(tree.root, []) or DomNode(tree.root.tag)
    return DomTree(root, tree.url)


# -- diff ------------------------------------------------------------------

@dataclass(frozen=True)
class DiffEntry:
    kind: str  # added | removed | modified
    path: str
    tag: str
    severity: str  # high | low
    detail: tuple[tuple[str, str], ...] = ()

    def to_dict(self):
        return {"kind": self.kind, "path": self.path, "tag": self.tag,
                "severity": self.severity, "detail": dict(self.detail)}


@dataclass(frozen=True)
class DiffReport:
    baseline_url: str
    observed_url: str
    entries: tuple[DiffEntry, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.entries

    @property
    def high(self) -> list[DiffEntry]:
        return [e for e in self.entries if e.severity == "high"]

    def to_dict(self):
        return {"baseline": self.baseline_url, "observed": self.observed_url,
                "injection_suspected": bool(self.high),
                "entries": [e.to_dict() for e in self.entries]}

    def to_text(self) -> str:
        lines = [f"baseline: {self.baseline_url or '-'}", f"observed: {self.observed_url or '-'}"]
        if self.empty:
            lines.append("no differences")
        for e in sorted(self.entries, key=lambda e: (e.severity != "high", e.path)):
            extra = ", ".join(f"{k}={v}" for k, v in e.detail)
            lines.append(f"[{e.severity.upper()}] {e.kind} {e.path}" + (f" ({extra})" if extra else ""))
        return "\n".join(lines) + "\n"


def _keys(children: Sequence[DomNode]) -> list[tuple]:
    seen: dict[str, int] = {}
    ids: dict[tuple, int] = {}
    keys = []
    for c in children:
        ident = c.attr("id") if c.is_element else None
        if ident:
            # ids should be unique, but pages repeat them; later duplicates get a suffix
            n = ids.get((c.tag, ident), 0)
            ids[(c.tag, ident)] = n + 1
            keys.append((c.tag, "#" + ident + (f"~{n}" if n else "")))
        else:
            n = seen.get(c.tag, 0)
            seen[c.tag] = n + 1
            keys.append((c.tag, n))
    return keys


def _segment(key: tuple) -> str:
    tag, which = key
    return f"{tag}{which}" if isinstance(which, str) else f"{tag}[{which}]"


def _reg_domain(url: str | None, base: str) -> str | None:
    if not url:
        return None
    host = urlsplit(urljoin(base, url)).hostname
    if not host:
        return None
    try:
        return default_psl().split(host).registrable
    except DomainError:
        return None


def _risky_descendants(node: DomNode) -> list[str]:
    return sorted({n.tag for n in node.iter() if n.tag in RISKY_TAGS})


def diff(baseline: DomTree, observed: DomTree) -> DiffReport:
    base_url = observed.url or baseline.url
    page_domain = _reg_domain(base_url, base_url)
    entries: list[DiffEntry] = []

    def compare(a: DomNode, b: DomNode, path: str):
        if a.text != b.text:
            entries.append(DiffEntry("modified", path, b.tag, "low",
                                     (("text_before", a.text[:80]), ("text_after", b.text[:80]))))
        if a.attrs != b.attrs:
            before, after = dict(a.attrs), dict(b.attrs)
            changed = sorted(k for k in before.keys() | after.keys() if before.get(k) != after.get(k))
            severity = "low"
            for k in URL_ATTRS:
                if k in changed and after.get(k):
                    new = _reg_domain(after[k], base_url)
                    old = _reg_domain(before.get(k), base_url) or page_domain
                    if new is not None and new != old:
                        severity = "high"
            entries.append(DiffEntry("modified", path, b.tag, severity,
                                     tuple((k, f"{before.get(k)!r} -> {after.get(k)!r}") for k in changed)))
        ka, kb = _keys(a.children), _keys(b.children)
        index_a = dict(zip(ka, a.children))
        index_b = dict(zip(kb, b.children))
        common_a = [k for k in ka if k in index_b]
        common_b = [k for k in kb if k in index_a]
        if common_a != common_b:
            entries.append(DiffEntry("modified", path, b.tag, "low",
                                     (("children_order", " ".join(_segment(k) for k in common_b)),)))
        for key, child in zip(ka, a.children):
            if key not in index_b:
                entries.append(DiffEntry("removed", f"{path}/{_segment(key)}", child.tag, "low"))
        for key, child in zip(kb, b.children):
            sub = f"{path}/{_segment(key)}"
            if key in index_a:
                compare(index_a[key], child, sub)
                continue
            risky = _risky_descendants(child)
            detail = [("risky", ",".join(risky))] if risky else []
            src = child.attr("src") or child.attr("data") if child.is_element else None
            if src:
                detail.append(("src", src))
            entries.append(DiffEntry("added", sub, child.tag, "high" if risky else "low", tuple(detail)))

    root_key = (baseline.root.tag, 0)
    if baseline.root.tag != observed.root.tag:
        entries.append(DiffEntry("removed", "/" + _segment(root_key), baseline.root.tag, "low"))
        entries.append(DiffEntry("added", "/" + _segment((observed.root.tag, 0)), observed.root.tag,
                                 "high" if _risky_descendants(observed.root) else "low"))
    else:
        compare(baseline.root, observed.root, "/" + _segment(root_key))
    return DiffReport(baseline.url, observed.url, tuple(entries))


def diff_html(baseline: bytes | str, observed: bytes | str, exclusions: Iterable[str] = (),
              volatile_attrs: Iterable[str] = DEFAULT_VOLATILE_ATTRS,
              baseline_url: str = "", observed_url: str = "") -> DiffReport:
    exclusions = list(exclusions)
    a = normalize(parse_html(baseline, baseline_url), exclusions, volatile_attrs)
    b = normalize(parse_html(observed, observed_url), exclusions, volatile_attrs)
    return diff(a, b)
