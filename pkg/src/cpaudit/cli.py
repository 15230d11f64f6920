"""Command-line driver.

Exit codes: 0 success, 1 validation error (bad input files, inconsistent
bundles), 2 usage error (argparse).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__
from .bundle import BundleError, PhaseRangeError, SessionMeta, convert_har, load_bundle, mark_phase, save_bundle
from .config import CONFIG_ENV, ConfigError, RunConfig
from .domains import DomainError, OwnershipError
from .domdiff import DEFAULT_VOLATILE_ATTRS, SelectorError, diff_html, load_exclusions
from .pii import ProfileError, load_profile
from .report import (FORMATS, AuditInputs, ReportError, aggregate_hotspot, analyze_bundle, anti_tracking_diff,
                     corpus_summary, parse_report, prevalence_count, render,
                     tracker_domains_with_persistent_cookies)

log = logging.getLogger("cpaudit")

EXTENSIONS = {"json": ".report.json", "csv": ".report.csv", "text": ".report.txt"}
VALIDATION_ERRORS = (BundleError, ConfigError, ReportError, PhaseRangeError, DomainError, OwnershipError,
                     ProfileError, SelectorError, OSError, ValueError)


class CliError(Exception):
    """Validation failure reported with exit code 1."""


def atomic_write(path: str | os.PathLike, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _filter_arg(text: str) -> tuple[str, str]:
    label, sep, path = text.partition("=")
    if not sep or not label or not path:
        raise argparse.ArgumentTypeError(f"expected label=path, got {text!r}")
    return label, path


def _formats_arg(text: str) -> list[str]:
    out = [f.strip() for f in text.split(",") if f.strip()]
    bad = [f for f in out if f not in FORMATS]
    if bad or not out:
        raise argparse.ArgumentTypeError(f"unknown format {','.join(bad) or text!r}; choose from {','.join(FORMATS)}")
    return out


def _add_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help=f"JSON run config (default: ${CONFIG_ENV} if set)")
    p.add_argument("--filters", action="append", type=_filter_arg, metavar="LABEL=PATH",
                   help="filter list with its label (advertising, privacy, social); repeatable")
    p.add_argument("--psl", help="public suffix list file (default: bundled snapshot)")
    p.add_argument("--owners", help="domain ownership database (default: bundled seed)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpaudit", description="Privacy audit of captive-portal captures.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("convert", help="convert a HAR file into a capture bundle")
    p.add_argument("har")
    p.add_argument("--meta", required=True, help="session metadata JSON")
    p.add_argument("--consent-at", help="consent marker timestamp (ISO 8601 or epoch ms)")
    p.add_argument("--out", required=True, help="bundle directory to create")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("analyze", help="analyze bundles and write one report per hotspot")
    p.add_argument("bundles", nargs="+")
    _add_inputs(p)
    p.add_argument("--catalog", help="fingerprinting API catalog (default: bundled)")
    p.add_argument("--pii", help="seeded PII profile JSON")
    p.add_argument("--consent-at", help="consent marker applied to every given bundle")
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", type=_formats_arg, help="comma-separated: json,csv,text")
    p.add_argument("--jobs", type=int, help="worker processes")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="re-render reports and summarize a corpus of reports")
    p.add_argument("reports", nargs="+", help="*.report.json files")
    p.add_argument("--format", type=_formats_arg, default=["text"])
    p.add_argument("--out", help="output directory (default: stdout)")
    p.add_argument("--summary", action="store_true", help="also emit averages/maxima across hotspots")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("domdiff", help="diff a page against its honeysite baseline")
    p.add_argument("baseline")
    p.add_argument("observed")
    p.add_argument("--exclusions", help="selectors for dynamic regions (JSON or one per line)")
    p.add_argument("--format", choices=("json", "text"), default="text")
    p.add_argument("--out", help="output file (default: stdout)")
    p.set_defaults(func=cmd_domdiff)

    p = sub.add_parser("compare", help="trackers surviving an anti-tracking configuration")
    p.add_argument("default")
    p.add_argument("protected", nargs="+")
    _add_inputs(p)
    p.add_argument("--out", help="output file (default: stdout)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("prevalence", help="count tracker domains in an observation corpus")
    p.add_argument("reports", nargs="+", help="*.report.json files providing the tracker domains")
    p.add_argument("--corpus", required=True, help="JSON Lines of {site, cookie_domain}")
    p.add_argument("--psl")
    p.add_argument("--out", help="output file (default: stdout)")
    p.set_defaults(func=cmd_prevalence)
    return parser


# -- config ----------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV)
    cfg = RunConfig.from_file(path) if path else RunConfig()
    if getattr(args, "filters", None):
        cfg.filters = list(args.filters)
    for name in ("psl", "owners", "catalog", "pii", "consent_at", "out", "jobs"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "format", None):
        cfg.formats = tuple(args.format)
    if cfg.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    return cfg


def _emit(text: str, out: str | None) -> None:
    if out:
        atomic_write(out, text)
    else:
        sys.stdout.write(text)


# -- commands --------------------------------------------------------------

def cmd_convert(args) -> int:
    meta = SessionMeta.from_dict(json.loads(Path(args.meta).read_text(encoding="utf-8")))
    if args.consent_at:
        meta = replace(meta, consent_at=None)
    bundle = convert_har(args.har, meta)
    if args.consent_at:
        bundle = mark_phase(bundle, args.consent_at)
    bundle.validate()
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise CliError(f"output directory {out} is not empty")
    tmp = Path(tempfile.mkdtemp(dir=out.parent if out.parent.exists() else None, prefix=f".{out.name}."))
    try:
        save_bundle(bundle, tmp)
        if out.exists():
            out.rmdir()
        os.replace(tmp, out)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    rep = bundle.conversion
    log.info("converted %d entries, skipped %d", rep.converted, rep.skipped_count)
    for idx, reason in rep.skipped:
        print(f"skipped entry {idx}: {reason}", file=sys.stderr)
    return 0


_WORKER: dict = {}


def _init_worker(cfg: RunConfig) -> None:
    _WORKER["inputs"] = AuditInputs.from_config(cfg)
    _WORKER["cfg"] = cfg


def _analyze_one(path: str):
    cfg, inputs = _WORKER["cfg"], _WORKER["inputs"]
    bundle = load_bundle(path)
    if cfg.consent_at:
        bundle = mark_phase(bundle, cfg.consent_at)
    profile = None
    if inputs.profile is None and bundle.meta.pii_profile_ref:
        profile = load_profile(Path(path) / bundle.meta.pii_profile_ref)
    return analyze_bundle(bundle, inputs, profile)


def cmd_analyze(args) -> int:
    cfg = resolve_config(args)
    _init_worker(cfg)  # fail fast in the parent, before any worker starts
    inputs = _WORKER["inputs"]
    paths = [str(p) for p in args.bundles]
    if cfg.jobs > 1 and len(paths) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs, initializer=_init_worker, initargs=(cfg,)) as pool:
            results = list(pool.map(_analyze_one, paths))
    else:
        results = [_analyze_one(p) for p in paths]

    by_hotspot = defaultdict(list)
    for a in results:
        by_hotspot[a.meta.hotspot_id].append(a)
    out = Path(cfg.out)
    reports = []
    for hotspot in sorted(by_hotspot):
        report = aggregate_hotspot(by_hotspot[hotspot], inputs.versions)
        reports.append(report)
        for fmt in cfg.formats:
            atomic_write(out / f"{_safe_name(hotspot)}{EXTENSIONS[fmt]}", render(report, fmt))
    if len(reports) > 1:
        atomic_write(out / "corpus-summary.json",
                     json.dumps(corpus_summary(reports), indent=2, sort_keys=True) + "\n")
    log.info("wrote %d report(s) to %s", len(reports), out)
    return 0


def _safe_name(hotspot_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in hotspot_id)


def _load_reports(paths):
    out = []
    for p in paths:
        out.append(parse_report(Path(p).read_text(encoding="utf-8")))
    return out


def cmd_report(args) -> int:
    reports = _load_reports(args.reports)
    for r in reports:
        for fmt in args.format:
            text = render(r, fmt)
            if args.out:
                atomic_write(Path(args.out) / f"{_safe_name(r.hotspot_id)}{EXTENSIONS[fmt]}", text)
            else:
                sys.stdout.write(text)
    if args.summary:
        text = json.dumps(corpus_summary(reports), indent=2, sort_keys=True) + "\n"
        _emit(text, str(Path(args.out) / "corpus-summary.json") if args.out else None)
    return 0


def cmd_domdiff(args) -> int:
    selectors, volatile = (load_exclusions(args.exclusions) if args.exclusions
                           else ([], DEFAULT_VOLATILE_ATTRS))
    result = diff_html(Path(args.baseline).read_bytes(), Path(args.observed).read_bytes(), selectors, volatile,
                       baseline_url=args.baseline, observed_url=args.observed)
    if args.format == "json":
        _emit(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", args.out)
    else:
        _emit(result.to_text(), args.out)
    return 0


def cmd_compare(args) -> int:
    cfg = resolve_config(args)
    inputs = AuditInputs.from_config(cfg)
    default = load_bundle(args.default)
    rows = []
    for path in args.protected:
        protected = load_bundle(path)
        rows.append(anti_tracking_diff(default, protected, inputs.filter_sets, inputs.owners, inputs.psl,
                                       inputs.thresholds).to_dict())
    _emit(json.dumps({"default": str(args.default), "protected": rows}, indent=2, sort_keys=True) + "\n",
          args.out)
    return 0


def cmd_prevalence(args) -> int:
    from .domains import load_psl
    reports = _load_reports(args.reports)
    domains = tracker_domains_with_persistent_cookies(reports)
    counts = prevalence_count(domains, args.corpus, load_psl(args.psl) if args.psl else None)
    _emit(json.dumps(counts, indent=2) + "\n", args.out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CliError, *VALIDATION_ERRORS) as exc:
        print(f"cpaudit {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
