"""Lexical detection of fingerprinting APIs in captured JavaScript.

Scripts are tokenized (comments dropped, string literals kept as data) and
catalog member chains such as ``navigator.plugins`` are matched on
consecutive identifier/dot tokens. Aliased receivers (``var n = navigator;
n.plugins``) are invisible to this approach except for catalog entries
flagged ``property_match``, which match as a bare property name on any
receiver.
"""
from __future__ import annotations

import json
import os
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence
from urllib.parse import urlsplit

from .config import DEFAULT_THRESHOLDS

CATEGORIES = ("Navigator", "Screen", "Canvas", "WebGL", "WebRTC", "AudioContext", "Battery", "Font", "Worker")
FONT_HEURISTIC = "font_side_channel"


# -- lexer -----------------------------------------------------------------

class Token(NamedTuple):
    kind: str  # ident | punct | string | number | regex
    value: str
    line: int


_REGEX_AFTER_KEYWORDS = frozenset(
    "return typeof case do else in instanceof new delete void throw yield await".split())
_PUNCT3 = ("...", "===", "!==", "**=", "<<=", ">>=", ">>>", "&&=", "||=", "??=")
_PUNCT2 = ("=>", "==", "!=", "<=", ">=", "&&", "||", "??", "++", "--", "+=", "-=", "*=", "/=",
           "%=", "&=", "|=", "^=", "<<", ">>", "**")


_IDENT_RE = re.compile(r"[^\W\d][\w$]*|\$[\w$]*")
_SPACE_RE = re.compile(r"[^\S\n]+")
_STRING_RE = {q: re.compile(q + r"((?:[^" + q + r"\\\n]|\\.)*)" + q, re.DOTALL) for q in "'\""}
_ESCAPE_RE = re.compile(r"\\(.)", re.DOTALL)


def _is_ident_start(ch: str) -> bool:
    return ch.isalpha() or ch in "_$"


def _is_ident_part(ch: str) -> bool:
    return ch.isalnum() or ch in "_$"


def lex_js(body: bytes | str) -> list[Token]:
    """Error-tolerant tokenizer: an unterminated literal drops the rest of its line."""
    src = body.decode("utf-8", errors="replace") if isinstance(body, bytes) else body
    n = len(src)
    out: list[Token] = []
    i, line = 0, 1
    # template literal nesting: each entry is the brace depth at which `${` opened
    templates: list[int] = []
    depth = 0

    def regex_allowed() -> bool:
        if not out:
            return True
        prev = out[-1]
        if prev.kind == "punct":
            return prev.value not in (")", "]", "}")
        if prev.kind == "ident":
            return prev.value in _REGEX_AFTER_KEYWORDS
        return False

    def skip_line(j: int) -> int:
        k = src.find("\n", j)
        return n if k < 0 else k

    def read_template(j: int) -> int:
        """Lex template text starting after ` (or after a closing }); returns new index."""
        nonlocal line
        buf = []
        while j < n:
            ch = src[j]
            if ch == "\\" and j + 1 < n:
                buf.append(src[j + 1])
                j += 2
                continue
            if ch == "`":
                out.append(Token("string", "".join(buf), line))
                return j + 1
            if ch == "$" and j + 1 < n and src[j + 1] == "{":
                out.append(Token("string", "".join(buf), line))
                templates.append(depth)
                return j + 2
            if ch == "\n":
                line += 1
            buf.append(ch)
            j += 1
        out.append(Token("string", "".join(buf), line))
        return n

    while i < n:
        ch = src[i]
        if ch == "\n":
            line += 1
            i += 1
        elif ch.isspace():
            m = _SPACE_RE.match(src, i)
            i = m.end() if m else i + 1
        elif ch == "/" and src.startswith("//", i):
            i = skip_line(i)
        elif ch == "/" and src.startswith("/*", i):
            end = src.find("*/", i + 2)
            end = n if end < 0 else end + 2
            line += src.count("\n", i, end)
            i = end
        elif _is_ident_start(ch):
            j = _IDENT_RE.match(src, i).end()
            out.append(Token("ident", src[i:j], line))
            i = j
        elif ch.isdigit() or (ch == "." and i + 1 < n and src[i + 1].isdigit()):
            j = i + 1
            while j < n and (src[j].isalnum() or src[j] in "._"):
                j += 1
            out.append(Token("number", src[i:j], line))
            i = j
        elif ch in "'\"":
            m = _STRING_RE[ch].match(src, i)
            if m:
                raw = m.group(1)
                line += raw.count("\\\n")
                out.append(Token("string", _ESCAPE_RE.sub(r"\1", raw) if "\\" in raw else raw, line))
                i = m.end()
            else:
                i = skip_line(i)
        elif ch == "`":
            i = read_template(i + 1)
        elif ch == "/" and regex_allowed():
            j = i + 1
            in_class = False
            ok = False
            while j < n:
                c = src[j]
                if c == "\\":
                    j += 2
                    continue
                if c == "\n":
                    break
                if c == "[":
                    in_class = True
                elif c == "]":
                    in_class = False
                elif c == "/" and not in_class:
                    ok = True
                    break
                j += 1
            if ok:
                j += 1
                while j < n and _is_ident_part(src[j]):
                    j += 1
                out.append(Token("regex", src[i:j], line))
                i = j
            else:
                i = skip_line(i)
        else:
            if ch == "{":
                depth += 1
            elif ch == "}":
                if templates and templates[-1] == depth:
                    templates.pop()
                    i = read_template(i + 1)
                    continue
                depth -= 1
            if src.startswith("?.", i) and not (i + 2 < n and src[i + 2].isdigit()):
                out.append(Token("punct", ".", line))
                i += 2
                continue
            for op in _PUNCT3 + _PUNCT2:
                if src.startswith(op, i):
                    out.append(Token("punct", op, line))
                    i += len(op)
                    break
            else:
                out.append(Token("punct", ch, line))
                i += 1
    return out


# -- catalog ---------------------------------------------------------------

@dataclass(frozen=True)
class CatalogEntry:
    category: str
    attribute: str
    chain: tuple[str, ...] = ()
    property_match: bool = False
    heuristic: str | None = None


@dataclass(frozen=True)
class ApiCatalog:
    entries: tuple[CatalogEntry, ...]
    fonts: frozenset = frozenset()
    font_probes: frozenset = frozenset({"offsetWidth", "offsetHeight", "measureText"})
    version: str | None = None

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.category not in CATEGORIES:
                raise ValueError(f"unknown category {e.category!r}")
            key = (e.category, e.attribute)
            if key in seen:
                raise ValueError(f"duplicate attribute {e.attribute!r} in {e.category}")
            seen.add(key)
        by_first, by_last = defaultdict(list), defaultdict(list)
        for e in self.entries:
            if e.chain:
                by_first[e.chain[0]].append(e)
                if e.property_match:
                    by_last[e.chain[-1]].append(e)
        object.__setattr__(self, "_by_first", dict(by_first))
        object.__setattr__(self, "_by_last", dict(by_last))

    def __len__(self):
        return len(self.entries)

    def heuristic_entry(self, name: str) -> CatalogEntry | None:
        return next((e for e in self.entries if e.heuristic == name), None)

    @classmethod
    def from_dict(cls, d) -> ApiCatalog:
        entries = []
        for raw in d["entries"]:
            chain = tuple(raw["chain"].split(".")) if raw.get("chain") else ()
            entries.append(CatalogEntry(
                category=raw["category"],
                attribute=raw.get("attribute") or (chain[-1] if chain else ""),
                chain=chain,
                property_match=bool(raw.get("property_match", False)),
                heuristic=raw.get("heuristic"),
            ))
        kw = {}
        if "font_probes" in d:
            kw["font_probes"] = frozenset(d["font_probes"])
        return cls(tuple(entries), frozenset(f.lower() for f in d.get("fonts", ())),
                   version=d.get("version"), **kw)


def load_catalog(path: str | os.PathLike | None = None) -> ApiCatalog:
    if path is None:
        text = resources.files("cpaudit.data").joinpath("fp_catalog.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return ApiCatalog.from_dict(json.loads(text))


# -- scanning --------------------------------------------------------------

@dataclass(frozen=True)
class FingerprintFinding:
    script_ref: str
    domain: str
    category: str
    attribute: str
    count: int
    phase: str = "unknown"

    @property
    def key(self) -> tuple[str, str]:
        return (self.category, self.attribute)

    def to_dict(self):
        return {"script": self.script_ref, "domain": self.domain, "category": self.category,
                "attribute": self.attribute, "count": self.count, "phase": self.phase}


def _chain_at(tokens: Sequence[Token], i: int, chain: tuple[str, ...]) -> bool:
    if i + 2 * (len(chain) - 1) >= len(tokens):
        return False
    for k, name in enumerate(chain):
        tok = tokens[i + 2 * k]
        if tok.kind != "ident" or tok.value != name:
            return False
        if k and (tokens[i + 2 * k - 1].kind != "punct" or tokens[i + 2 * k - 1].value != "."):
            return False
    return True


def match_catalog(tokens: Sequence[Token], catalog: ApiCatalog) -> Counter:
    hits: Counter = Counter()
    by_first, by_last = catalog._by_first, catalog._by_last
    for i, tok in enumerate(tokens):
        if tok.kind != "ident":
            continue
        matched = set()
        for e in by_first.get(tok.value, ()):
            if _chain_at(tokens, i, e.chain):
                matched.add(e)
        # aliased receiver: `<anything>.getBattery`
        if i and tokens[i - 1].kind == "punct" and tokens[i - 1].value == ".":
            for e in by_last.get(tok.value, ()):
                start = i - 2 * (len(e.chain) - 1)
                if len(e.chain) > 1 and (start < 0 or not _chain_at(tokens, start, e.chain)):
                    matched.add(e)
        for e in matched:
            hits[e] += 1
    return hits


def _serving_domain(script, classifier) -> str:
    url = script.serving_url or ""
    host = urlsplit(url).hostname or ""
    if not host:
        return ""
    return classifier.registrable(host) if classifier is not None else host


def scan_script(script, catalog: ApiCatalog, body: bytes | str | None = None, *,
                tokens: Sequence[Token] | None = None, classifier=None) -> list[FingerprintFinding]:
    if tokens is None:
        tokens = lex_js(body or b"")
    domain = _serving_domain(script, classifier)
    hits = match_catalog(tokens, catalog)
    found = [FingerprintFinding(script.ref, domain, e.category, e.attribute, c, script.phase)
             for e, c in hits.items()]
    return sorted(found, key=lambda f: (CATEGORIES.index(f.category), f.attribute))


def font_heuristic(script, catalog: ApiCatalog, body: bytes | str | None = None, *,
                   tokens: Sequence[Token] | None = None, classifier=None,
                   min_fonts: int = DEFAULT_THRESHOLDS.font_min_names) -> FingerprintFinding | None:
    """Font finding when many known font families appear as literals and the
    script also measures rendered text (offsetWidth, offsetHeight or measureText)."""
    if tokens is None:
        tokens = lex_js(body or b"")
    probes = any(t.kind == "ident" and t.value in catalog.font_probes for t in tokens)
    if not probes:
        return None
    fonts = set()
    for t in tokens:
        if t.kind != "string":
            continue
        for part in t.value.split(","):
            name = part.strip().strip("'\"").strip().lower()
            if name in catalog.fonts:
                fonts.add(name)
    if len(fonts) < min_fonts:
        return None
    entry = catalog.heuristic_entry(FONT_HEURISTIC)
    attribute = entry.attribute if entry else FONT_HEURISTIC
    return FingerprintFinding(script.ref, _serving_domain(script, classifier), "Font", attribute,
                              len(fonts), script.phase)


def scan_bundle_scripts(bundle, catalog: ApiCatalog, classifier=None,
                        min_fonts: int = DEFAULT_THRESHOLDS.font_min_names) -> list[FingerprintFinding]:
    out = []
    for script in bundle.scripts:
        tokens = lex_js(bundle.body(script.body_ref))
        out += scan_script(script, catalog, tokens=tokens, classifier=classifier)
        font = font_heuristic(script, catalog, tokens=tokens, classifier=classifier, min_fonts=min_fonts)
        if font is not None:
            out.append(font)
    return out


@dataclass(frozen=True)
class FingerprintSummary:
    attributes: dict  # category -> sorted attribute names
    pre_consent: dict

    @staticmethod
    def _total(d) -> int:
        return sum(len(v) for v in d.values())

    @property
    def total(self) -> int:
        return self._total(self.attributes)

    @property
    def pre_consent_total(self) -> int:
        return self._total(self.pre_consent)

    def to_dict(self):
        return {
            "total": self.total,
            "by_category": {k: {"count": len(v), "attributes": list(v)} for k, v in self.attributes.items()},
            "pre_consent_total": self.pre_consent_total,
            "pre_consent_by_category": {k: {"count": len(v), "attributes": list(v)}
                                        for k, v in self.pre_consent.items()},
        }


def _group(keys: Iterable[tuple[str, str]]) -> dict:
    grouped = defaultdict(set)
    for cat, attr in keys:
        grouped[cat].add(attr)
    return {c: sorted(grouped[c]) for c in CATEGORIES if grouped.get(c)}


def aggregate_fingerprints(findings: Iterable[FingerprintFinding]) -> FingerprintSummary:
    """Distinct attributes per category; repeated use of an attribute counts once."""
    findings = list(findings)
    return FingerprintSummary(
        attributes=_group(f.key for f in findings),
        pre_consent=_group(f.key for f in findings if f.phase == "pre_consent"),
    )
