import hashlib

import pytest

from builders import PROFILE, BundleBuilder, clean_corpus_bundle, pii_recall_bundle
from cpaudit.domains import OwnershipDb, PartyClassifier, load_ownership
from cpaudit.pii import (PiiItem, PiiProfile, ProfileError, VariantError, canonical_mac, compile_needles,
                         expand_variants, find_in_bytes, mac_exposure_report, scan_bundle)


def _scan(bundle, profile=PROFILE):
    return scan_bundle(bundle, PiiProfile.from_dict(profile), PartyClassifier(bundle.meta.owner_domains,
                                                                             OwnershipDb()))


def test_variants_cover_encodings():
    item = PiiItem("email", "Margaux.Tremblay@example.org")
    encs = {v.encoding for v in expand_variants(item)}
    assert {"plain", "case_folded", "url_encoded", "base64", "hex", "md5", "sha1", "sha256"} <= encs
    # the URL-safe alphabet only yields a distinct needle when '+' or '/' occur
    assert "base64_urlsafe" not in encs
    odd = {v.encoding for v in expand_variants(PiiItem("membership_number", "??>>??>>"))}
    assert "base64_urlsafe" in odd
    md5 = next(v.needle for v in expand_variants(item) if v.encoding == "md5")
    assert md5 == hashlib.md5(b"margaux.tremblay@example.org").hexdigest().encode()


def test_short_values_rejected():
    with pytest.raises(VariantError):
        expand_variants(PiiItem("age", "34"))
    # rejected items are skipped, not fatal, when compiling a whole profile
    assert compile_needles(PiiProfile.from_dict({"age": "34"})) == []


def test_mac_canonical_and_variants():
    assert canonical_mac("3c-22-fb-12-ab-9e") == "3c:22:fb:12:ab:9e"
    with pytest.raises(ProfileError):
        canonical_mac("3c:22:fb:12:ab")
    needles = {v.needle for v in expand_variants(PiiItem("mac_address", "3C22FB12AB9E"))
               if v.encoding in ("mac_format_variant", "plain", "case_folded")}
    for spelling in ("3c:22:fb:12:ab:9e", "3C:22:FB:12:AB:9E", "3c-22-fb-12-ab-9e", "3C-22-FB-12-AB-9E",
                     "3c22fb12ab9e", "3C22FB12AB9E"):
        assert spelling.encode() in needles


@pytest.mark.parametrize("spelling", ["3c:22:fb:12:ab:9e", "3C:22:FB:12:AB:9E", "3c-22-fb-12-ab-9e",
                                      "3C-22-FB-12-AB-9E", "3c22fb12ab9e", "3C22FB12AB9E"])
def test_mac_spellings_detected_in_traffic(spelling):
    b = BundleBuilder(owner_domains=["venue.com"])
    b.request(f"http://n42.network-auth.com/splash/?client_mac={spelling}&x=1")
    findings = _scan(b.build(), {"mac_address": "3c:22:fb:12:ab:9e"})
    assert [(f.kind, f.channel, f.transport) for f in findings] == [
        ("mac_address", "request_url", "plaintext_http")]


def test_case_sensitive_encodings_are_verified():
    needles = compile_needles(PiiProfile.from_dict({"email": "margaux.tremblay@example.org"}))
    import base64
    b64 = base64.b64encode(b"margaux.tremblay@example.org").rstrip(b"=")
    assert any(nd.encoding == "base64" for nd, _ in find_in_bytes(b"x=" + b64, needles))
    assert not any(nd.encoding == "base64" for nd, _ in find_in_bytes(b"x=" + b64.swapcase(), needles))


def test_full_recall():
    bundle, expected = pii_recall_bundle()
    got = {(f.kind, f.encoding, f.channel, f.transaction_id) for f in _scan(bundle)}
    assert expected - got == set()


def test_clean_corpus_small():
    bundle, _ = clean_corpus_bundle(500_000)
    assert _scan(bundle) == []


def test_leak_attributes_and_mac_report():
    b = BundleBuilder("pizza", owner_domains=["pizza.com"])
    b.request("http://n1.network-auth.com/x?mac=3C:22:FB:12:AB:9E")
    b.request("https://wifi.pizza.com/x?mac=3C:22:FB:12:AB:9E")
    findings = _scan(b.build(), {"mac_address": "3C:22:FB:12:AB:9E"})
    third = [f for f in findings if f.party == "third_party"]
    assert len(third) == 1 and third[0].destination == "network-auth.com"
    assert third[0].transport == "plaintext_http"
    report = mac_exposure_report({"pizza": findings, "cafe": third}, load_ownership())
    assert report == {"Network-auth": 2}
