"""Run configuration: input files, thresholds, output options."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

CONFIG_ENV = "CPAUDIT_CONFIG"


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class Thresholds:
    persistent_seconds: int = 86_400
    identifier_min_length: int = 8
    identifier_min_entropy: float = 3.0
    identifier_strip_prefixes: tuple[str, ...] = ("GA1.", "GS1.", "fb.1.")
    pii_min_length: int = 4
    font_min_names: int = 20

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Thresholds:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown threshold(s): {', '.join(sorted(unknown))}")
        kw = dict(d)
        if "identifier_strip_prefixes" in kw:
            kw["identifier_strip_prefixes"] = tuple(kw["identifier_strip_prefixes"])
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["identifier_strip_prefixes"] = list(self.identifier_strip_prefixes)
        return d


DEFAULT_THRESHOLDS = Thresholds()


def file_digest(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunConfig:
    filters: list[tuple[str, str]] = field(default_factory=list)  # (label, path)
    psl: str | None = None
    owners: str | None = None
    catalog: str | None = None
    pii: str | None = None
    exclusions: str | None = None
    consent_at: str | None = None
    out: str = "."
    formats: tuple[str, ...] = ("json",)
    jobs: int = 1
    thresholds: Thresholds = DEFAULT_THRESHOLDS

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> RunConfig:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        base = Path(path).parent

        def rel(p):
            return None if p is None else str(base / p)

        filters = []
        for item in raw.get("filters", []):
            if isinstance(item, str):
                label, _, p = item.partition("=")
            else:
                label, p = item["label"], item["path"]
            filters.append((label, rel(p)))
        return cls(
            filters=filters,
            psl=rel(raw.get("psl")),
            owners=rel(raw.get("owners")),
            catalog=rel(raw.get("catalog")),
            pii=rel(raw.get("pii")),
            exclusions=rel(raw.get("exclusions")),
            consent_at=raw.get("consent_at"),
            out=raw.get("out", "."),
            formats=tuple(raw.get("formats", ("json",))),
            jobs=int(raw.get("jobs", 1)),
            thresholds=Thresholds.from_dict(raw.get("thresholds", {})),
        )

    def referenced_paths(self) -> list[str]:
        paths = [p for _, p in self.filters]
        paths += [p for p in (self.psl, self.owners, self.catalog, self.pii, self.exclusions) if p]
        return paths

    def check_paths(self) -> None:
        for p in self.referenced_paths():
            if not Path(p).is_file():
                raise ConfigError(f"input file not found: {p}")
