"""Acceptance criteria, one test each; the terminal summary prints PASS/FAIL per criterion."""
import json
import os
import random
import time

import pytest

from builders import (DAY_S, FILTER_ARGS, T0, BundleBuilder, anti_tracking_pair, audit_inputs, clean_corpus_bundle,
                      fingerprint_script, hvmans_bundles, pii_recall_bundle, synthetic_hotspot)
from cpaudit.bundle import save_bundle
from cpaudit.cli import main
from cpaudit.cookies import analyze_cookie, distinct_cookies, extract_cookies, lifetime_bucket, pre_consent_report
from cpaudit.domains import OwnershipDb, PartyClassifier, load_ownership
from cpaudit.domdiff import diff_html, load_exclusions
from cpaudit.fingerprint import aggregate_fingerprints, load_catalog, scan_bundle_scripts
from cpaudit.pii import PiiProfile, scan_bundle
from cpaudit.report import (aggregate_hotspot, analyze_bundle, anti_tracking_diff, prevalence_count,
                            tracker_domains_with_persistent_cookies)
from test_cookies import expected_bucket
from test_domains import check_public_suffix, psl_vectors
from test_filters import run_oracle_cases
from test_pii import _scan

pytestmark = pytest.mark.acceptance


def _filters():
    return [x for a in FILTER_ARGS for x in ("--filters", a)]


@pytest.mark.criterion("Filter-matcher oracle equivalence (10,000 cases, 0 mismatches, < 10 s)")
def test_filter_oracle(detail):
    start = time.perf_counter()
    cases, mismatches = run_oracle_cases(10_000, seed=2019)
    elapsed = time.perf_counter() - start
    detail(f"{cases} cases, {len(mismatches)} mismatches, {elapsed:.2f} s")
    assert cases >= 10_000
    assert mismatches == []
    assert elapsed < 10


@pytest.mark.criterion("Public-suffix extraction passes the published test vectors at 100%")
def test_psl_vectors_all(detail):
    vectors = psl_vectors()
    passed = sum(check_public_suffix(h) == want for h, want in vectors)
    detail(f"{passed}/{len(vectors)}")
    assert passed == len(vectors)


@pytest.mark.criterion("Cookie buckets exact at 1 d / 182 d / 1826 d; 20-year network-auth.com cookie")
def test_cookie_buckets(detail):
    rng = random.Random(5)
    fifty_years = 50 * 365 * DAY_S
    samples = [rng.randint(0, fifty_years) for _ in range(100_000)]
    for edge in (DAY_S, 182 * DAY_S, 1826 * DAY_S):
        samples += [edge - 1, edge, edge + 1]
    samples += [0, fifty_years]
    wrong = [s for s in samples if lifetime_bucket(s) != expected_bucket(s)]
    assert lifetime_bucket(DAY_S - 1) == "session" and lifetime_bucket(DAY_S) == "under_6_months"
    assert lifetime_bucket(182 * DAY_S - 1) == "under_6_months"
    assert lifetime_bucket(182 * DAY_S) == "six_months_to_5_years"
    assert lifetime_bucket(1826 * DAY_S - 1) == "six_months_to_5_years"
    assert lifetime_bucket(1826 * DAY_S) == "over_5_years"

    b = BundleBuilder("tim-hortons", owner_domains=["timhortons.ca"])
    for path in ("/splash/", "/splash/login"):
        b.request(f"https://n110.network-auth.com{path}", set_cookies=[
            f"_nauth_id=8f2c1a77e0b94d3c; Domain=.network-auth.com; Max-Age={20 * 365 * DAY_S}; Path=/"])
    bundle = b.build()
    db = load_ownership()
    analyses = [analyze_cookie(r, bundle.meta, db=db) for r in extract_cookies(bundle)]
    distinct = list(distinct_cookies(analyses).values())
    detail(f"{len(samples)} lifetimes, {len(wrong)} misbucketed; network-auth: "
           f"{[(c.bucket, c.party) for c in distinct]}")
    assert wrong == []
    assert len(distinct) == 1
    assert (distinct[0].registrable_domain, distinct[0].bucket, distinct[0].party) == (
        "network-auth.com", "over_5_years", "third")


@pytest.mark.criterion("Pre-consent detection yields exactly the injected set; tie goes post_consent")
def test_pre_consent(detail):
    consent = T0 + 45_000
    b = BundleBuilder("carrefour", owner_domains=["carrefour.ca"], consent_at=consent)
    injected = {("network-auth.com", "_nauth"), ("doubleclick.net", "IDE"), ("carrefour.ca", "visitor")}
    b.request("https://wifi.carrefour.ca/", ts=T0, set_cookies=[f"visitor=v81; Max-Age={700 * DAY_S}"])
    b.request("https://n1.network-auth.com/s", ts=T0 + 1000,
              set_cookies=[f"_nauth=a9; Domain=.network-auth.com; Max-Age={7300 * DAY_S}"])
    b.request("https://ad.doubleclick.net/x", ts=T0 + 2000,
              set_cookies=[f"IDE=AHWq; Domain=.doubleclick.net; Max-Age={390 * DAY_S}"])
    b.request("https://ad.doubleclick.net/y", ts=T0 + 3000, set_cookies=["test_cookie=CheckForPermission"])
    b.request("https://ad.doubleclick.net/z", ts=T0 + 4000, set_cookies=["short=1; Max-Age=3600"])
    b.request("https://t.tracker.net/tie", ts=consent, set_cookies=[f"tie=1; Max-Age={90 * DAY_S}"])
    b.request("https://t.tracker.net/late", ts=consent + 5000, set_cookies=[f"late=1; Max-Age={90 * DAY_S}"])
    bundle = b.build()
    analyses = [analyze_cookie(r, bundle.meta) for r in extract_cookies(bundle)]
    got = {(i.domain, i.name) for i, _ in pre_consent_report(analyses, bundle.meta).cookies}
    tie = next(a for a in analyses if a.record.name == "tie")
    detail(f"found {sorted(got)}; tie phase {tie.record.phase}")
    assert got == injected
    assert tie.record.phase == "post_consent"


@pytest.mark.criterion("Fingerprint aggregation: 35 Navigator + 6 Screen + 3 Canvas + 3 Battery = 47")
def test_fingerprint_47(detail):
    catalog = load_catalog()
    composition = {"Navigator": 35, "Screen": 6, "Canvas": 3, "Battery": 3}
    b = BundleBuilder("fp-max", owner_domains=["venue.com"])
    # the same attribute set spread over three scripts, with repeats
    src, _ = fingerprint_script(composition, seed=47)
    lines = src.splitlines()
    b.script("https://cdn.fp.example/1.js", "\n".join(lines[: len(lines) // 2]) + "\n})();")
    b.script("https://cdn.fp.example/2.js", "(function(){\n" + "\n".join(lines[len(lines) // 2:]))
    b.script("https://cdn.other.example/3.js", src + src)
    findings = scan_bundle_scripts(b.build(), catalog, PartyClassifier(("venue.com",), OwnershipDb()))
    summary = aggregate_fingerprints(findings)
    per = {c: len(v) for c, v in summary.attributes.items()}
    detail(f"total {summary.total} {per}")
    assert per == composition
    assert summary.total == 47


@pytest.mark.criterion("PII scanning: 100% recall, 0 false positives on >= 10 MB, all MAC spellings")
def test_pii(detail):
    bundle, expected = pii_recall_bundle()
    got = {(f.kind, f.encoding, f.channel, f.transaction_id) for f in _scan(bundle)}
    recall = len(expected & got) / len(expected)
    clean, size = clean_corpus_bundle(10 * 1024 * 1024 + 1)
    false_positives = _scan(clean)
    mac_ok = 0
    spellings = ("3c:22:fb:12:ab:9e", "3C:22:FB:12:AB:9E", "3c-22-fb-12-ab-9e", "3C-22-FB-12-AB-9E",
                 "3c22fb12ab9e", "3C22FB12AB9E")
    for s in spellings:
        b = BundleBuilder(owner_domains=["venue.com"])
        b.request(f"http://n1.network-auth.com/s?client_mac={s}")
        findings = _scan(b.build(), {"mac_address": "3C:22:FB:12:AB:9E"})
        mac_ok += any(f.kind == "mac_address" for f in findings)
    detail(f"recall {recall:.0%} over {len(expected)} carriers; {len(false_positives)} FP on "
           f"{size / 2**20:.1f} MiB; MAC spellings {mac_ok}/{len(spellings)}")
    assert recall == 1.0
    assert size >= 10 * 1024 * 1024 and false_positives == []
    assert mac_ok == len(spellings)


@pytest.mark.criterion("DOM injection: script/iframe high; baseline-vs-baseline empty; ticker excluded")
def test_dom_injection(detail):
    from builders import DATA
    honey = DATA / "honeysite"
    dynamic = (honey / "dynamic.html").read_bytes()
    static = (honey / "static.html").read_bytes()
    selectors, volatile = load_exclusions(honey / "exclusions.json")
    url = "https://honeysite.example.net/"
    script = dynamic.replace(b"</body>", b'<script src="http://evil.example/x.js"></script></body>')
    iframe = dynamic.replace(b"<main>", b'<main><iframe src="https://inject.example/ad"></iframe>', 1)
    ticker = dynamic.replace(b"ETH 136.10", b"ETH 141.75")
    r_script = diff_html(dynamic, script, selectors, volatile, url, url)
    r_iframe = diff_html(dynamic, iframe, selectors, volatile, url, url)
    self_static = diff_html(static, static, selectors, volatile, url, url)
    self_dynamic = diff_html(dynamic, dynamic, selectors, volatile, url, url)
    unexcluded = diff_html(dynamic, ticker, [], volatile, url, url)
    excluded = diff_html(dynamic, ticker, selectors, volatile, url, url)
    detail(f"script high={len(r_script.high)}, iframe high={len(r_iframe.high)}, "
           f"self-diff entries={len(self_static.entries) + len(self_dynamic.entries)}, "
           f"ticker {len(unexcluded.entries)}->{len(excluded.entries)}")
    assert [e.tag for e in r_script.high] == ["script"]
    assert any(e.tag == "iframe" for e in r_iframe.high)
    assert self_static.empty and self_dynamic.empty
    assert not unexcluded.empty and excluded.empty


@pytest.mark.criterion("End-to-end: Hvmans fixture {34, 7}, byte-deterministic; ~10 hotspots ~100 MB < 60 s")
def test_end_to_end(tmp_path, detail):
    dirs = [str(save_bundle(b, tmp_path / f"hv{i}")) for i, b in enumerate(hvmans_bundles())]
    outs = []
    for run in ("a", "b"):
        out = tmp_path / f"out-{run}"
        assert main(["analyze", *dirs, *_filters(), "--out", str(out), "--format", "json,csv,text"]) == 0
        outs.append((out / "hvmans-cafe.report.json").read_bytes())
    page = json.loads(outs[0])["pages"]["captive_portal"]
    counts = (page["third_party_domains"]["count"], page["known_trackers"]["count"])

    start = time.perf_counter()
    suite = []
    total = 0
    for i in range(10):
        for j, b in enumerate(synthetic_hotspot(i, 10 * 1024 * 1024)):
            total += sum(len(v) for v in b.bodies.values()) + sum(len(t.request_body) for t in b.transactions)
            suite.append(str(save_bundle(b, tmp_path / "suite" / f"h{i}-{j}")))
    jobs = str(max(1, min(4, os.cpu_count() or 1)))
    rc = main(["analyze", *suite, *dirs, *_filters(), "--out", str(tmp_path / "suite-out"), "--jobs", jobs])
    elapsed = time.perf_counter() - start
    reports = list((tmp_path / "suite-out").glob("*.report.json"))
    detail(f"hvmans {counts}, reruns identical={outs[0] == outs[1]}; suite {len(reports)} hotspots, "
           f"{total / 2**20:.0f} MiB in {elapsed:.1f} s (jobs={jobs})")
    assert counts == (34, 7)
    assert outs[0] == outs[1]
    assert rc == 0 and len(reports) == 11
    assert total >= 95 * 2**20
    assert elapsed < 60


@pytest.mark.criterion("Anti-tracking diff yields the exact expected unblocked-domain list")
def test_anti_tracking(detail):
    inputs = audit_inputs()
    default, protected, survivors = anti_tracking_pair()
    got = anti_tracking_diff(default, protected, inputs.filter_sets, inputs.owners)
    detail(f"{got.count}: {', '.join(got.domains)}")
    assert list(got.domains) == survivors


@pytest.mark.criterion("Prevalence counting returns 160,508 for doubleclick.net")
def test_prevalence(tmp_path, detail):
    inputs = audit_inputs()
    b = BundleBuilder("cafe", owner_domains=["cafe.ca"])
    b.request("https://ad.doubleclick.net/x", set_cookies=[f"IDE=AHWq; Domain=.doubleclick.net; Max-Age={390 * DAY_S}"])
    report = aggregate_hotspot([analyze_bundle(b.build(), inputs)])
    trackers = tracker_domains_with_persistent_cookies([report])
    rng = random.Random(160508)
    spellings = [".doubleclick.net", "doubleclick.net", "stats.g.doubleclick.net", ".ad.doubleclick.net"]
    others = [".pubmatic.com", ".facebook.com", "notdoubleclick.net", "doubleclick.net.evil.io", ".adnxs.com"]
    corpus = tmp_path / "corpus.jsonl"
    with open(corpus, "w") as fh:
        for i in range(160_508):
            site = f"site{rng.randrange(40_000)}.com"  # repeated (site, domain) pairs on purpose
            fh.write(json.dumps({"site": site, "cookie_domain": rng.choice(spellings)}) + "\n")
            if i % 2 == 0:
                fh.write(json.dumps({"site": site, "cookie_domain": rng.choice(others)}) + "\n")
    counts = prevalence_count(trackers, corpus)
    detail(f"{counts}")
    assert trackers == ["doubleclick.net"]
    assert counts["doubleclick.net"] == 160_508
