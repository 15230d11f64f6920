from hypothesis import given, settings
from hypothesis import strategies as st

from builders import T0, BundleBuilder
from cpaudit.cookies import (DAY, FIVE_YEARS, SIX_MONTHS, analyze_cookie, distinct_cookies, extract_cookies,
                             is_identifier_like, lifetime_bucket, parse_set_cookie, pre_consent_report,
                             shannon_entropy)
from cpaudit.domains import load_ownership
from cpaudit.pii import PiiProfile, compile_needles

YEAR = 365 * DAY


def expected_bucket(seconds):
    # written out from the bucket definitions, independently of the implementation
    days = seconds / 86_400
    if days < 1:
        return "session"
    if days < 182:
        return "under_6_months"
    if days < 1826:
        return "six_months_to_5_years"
    return "over_5_years"


@settings(max_examples=2000, deadline=None)
@given(st.integers(min_value=0, max_value=50 * YEAR))
def test_bucket_property(seconds):
    assert lifetime_bucket(seconds) == expected_bucket(seconds)


def test_bucket_edges_exact():
    for edge, below, at in ((DAY, "session", "under_6_months"),
                            (SIX_MONTHS, "under_6_months", "six_months_to_5_years"),
                            (FIVE_YEARS, "six_months_to_5_years", "over_5_years")):
        assert lifetime_bucket(edge - 1) == below
        assert lifetime_bucket(edge) == at
    assert lifetime_bucket(None) == "session"


def test_set_cookie_parsing_precedence_and_defaults():
    b = BundleBuilder()
    tx = b.request("https://www.shop.com/a/b/page")
    c = parse_set_cookie("id=1; Expires=Wed, 01 Jan 2020 00:00:00 GMT; Max-Age=86400; Domain=.Shop.com", tx)
    assert c.expiry_time - c.creation_time == 86_400_000  # Max-Age wins over Expires
    assert c.domain == ".shop.com" and c.path == "/a/b"
    c = parse_set_cookie("x=y; expires=Wed, 01-Jan-2020 00:00:00 GMT", tx)
    assert c.domain == "www.shop.com" and c.expiry_time > c.creation_time


def test_unparseable_set_cookie_kept_raw():
    b = BundleBuilder()
    b.request("https://a.com/", set_cookies=["novalue", "ok=1; Max-Age=5\nalso=2"])
    cookies = extract_cookies(b.build())
    assert [c.name for c in cookies] == ["ok", "also"]
    assert len(cookies.raw) == 1 and cookies.raw[0].header == "novalue"


def test_identifier_like():
    assert is_identifier_like("GA1.2.1234567890.1551441600")
    assert not is_identifier_like("true")
    assert not is_identifier_like("aaaaaaaaaaaa")
    assert shannon_entropy("ab") == 1.0


def test_network_auth_twenty_year_cookie():
    """A 20-year third-party cookie from network-auth.com, seen twice."""
    db = load_ownership()
    b = BundleBuilder("via-rail", owner_domains=["viarail.ca"])
    b.request("https://n242.network-auth.com/splash/", set_cookies=[
        f"_ga_nauth=GA1.2.98765.4321; Domain=.network-auth.com; Max-Age={20 * 365 * DAY}; Path=/"])
    b.request("https://n242.network-auth.com/splash/grant", set_cookies=[
        f"_ga_nauth=GA1.2.98765.4321; Domain=.network-auth.com; Max-Age={2 * DAY}; Path=/"])
    bundle = b.build()
    analyses = [analyze_cookie(r, bundle.meta, db=db) for r in extract_cookies(bundle)]
    distinct = distinct_cookies(analyses)
    assert len(distinct) == 1
    (only,) = distinct.values()
    assert only.registrable_domain == "network-auth.com"
    assert only.party == "third" and only.bucket == "over_5_years"


def test_distinct_keeps_longest_and_pre_consent():
    b = BundleBuilder(consent_at=T0 + 1000)
    b.cookie("a.tracker.net", "id", lifetime_s=10 * DAY, created=T0)
    b.cookie("b.tracker.net", "id", lifetime_s=400 * DAY, created=T0 + 2000)
    bundle = b.build()
    analyses = [analyze_cookie(r, bundle.meta) for r in bundle.cookies]
    (only,) = distinct_cookies(analyses).values()
    assert only.lifetime_seconds == 400 * DAY and only.pre_consent


def test_pre_consent_fixture_and_tie():
    consent = T0 + 10_000
    b = BundleBuilder("mall", owner_domains=["mall.com"], consent_at=consent)
    expected = set()
    for i, (dom, life) in enumerate([("tracker.net", 30 * DAY), ("ads.io", 3 * 365 * DAY),
                                     ("mall.com", 400 * DAY)]):
        b.cookie(dom, f"pre{i}", lifetime_s=life, created=T0 + i)
        expected.add((dom, f"pre{i}"))
    b.cookie("tracker.net", "session_pre", lifetime_s=None, created=T0)  # not persistent
    b.cookie("tracker.net", "short_pre", lifetime_s=3600, created=T0)  # under one day
    b.cookie("tracker.net", "tie", lifetime_s=90 * DAY, created=consent)  # exactly at consent
    b.cookie("tracker.net", "after", lifetime_s=90 * DAY, created=consent + 1)
    bundle = b.build()
    analyses = [analyze_cookie(r, bundle.meta) for r in bundle.cookies]
    summary = pre_consent_report(analyses, bundle.meta)
    assert {(i.domain, i.name) for i, _ in summary.cookies} == expected
    assert summary.count == 3


def test_pre_consent_without_marker_is_not_evaluable():
    b = BundleBuilder()
    b.cookie("tracker.net", "x", lifetime_s=10 * DAY)
    bundle = b.build()
    summary = pre_consent_report([analyze_cookie(r, bundle.meta) for r in bundle.cookies], bundle.meta)
    assert not summary.evaluable and summary.count is None


def test_pii_in_cookie_value():
    needles = compile_needles(PiiProfile.from_dict({"email": "jane.doe@example.org"}))
    b = BundleBuilder()
    b.cookie("tracker.net", "u", "jane.doe%40example.org", lifetime_s=DAY)
    bundle = b.build()
    a = analyze_cookie(bundle.cookies[0], bundle.meta, needles=needles)
    assert a.pii_hits == ("email",)
