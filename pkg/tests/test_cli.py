import json

import pytest

from builders import DATA, FILTER_ARGS, T0, anti_tracking_pair, hvmans_bundles
from cpaudit.bundle import load_bundle, save_bundle
from cpaudit.cli import main
from test_bundle import _har


def _filters():
    out = []
    for arg in FILTER_ARGS:
        out += ["--filters", arg]
    return out


@pytest.fixture
def hvmans_dirs(tmp_path):
    dirs = []
    for i, b in enumerate(hvmans_bundles()):
        dirs.append(str(save_bundle(b, tmp_path / f"hvmans-{i}")))
    return dirs


def test_analyze_writes_reports_deterministically(tmp_path, hvmans_dirs):
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert main(["analyze", *hvmans_dirs, *_filters(), "--out", str(out1), "--format", "json,csv,text"]) == 0
    assert main(["analyze", *hvmans_dirs, *_filters(), "--out", str(out2), "--format", "json,csv,text",
                 "--jobs", "2"]) == 0
    for name in ("hvmans-cafe.report.json", "hvmans-cafe.report.csv", "hvmans-cafe.report.txt"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    doc = json.loads((out1 / "hvmans-cafe.report.json").read_text())
    page = doc["pages"]["captive_portal"]
    assert page["third_party_domains"]["count"] == 34 and page["known_trackers"]["count"] == 7
    assert [f["label"] for f in doc["inputs"]["filter_lists"]] == ["advertising", "privacy", "social"]
    assert not list(out1.glob(".*.tmp"))


def test_missing_psl_is_validation_error(tmp_path, hvmans_dirs, capsys):
    missing = tmp_path / "nope" / "psl.dat"
    assert main(["analyze", *hvmans_dirs, "--psl", str(missing), "--out", str(tmp_path / "o")]) == 1
    assert str(missing) in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    assert "usage:" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["analyze", "x", "--format", "xml"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["analyze", "x", "--filters", "no-equals-sign"])
    assert exc.value.code == 2


def test_config_file_and_env(tmp_path, hvmans_dirs, monkeypatch):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({
        "filters": [{"label": a.split("=")[0], "path": a.split("=")[1]} for a in FILTER_ARGS],
        "formats": ["csv"], "out": str(tmp_path / "from-config"),
    }))
    monkeypatch.setenv("CPAUDIT_CONFIG", str(cfg))
    assert main(["analyze", *hvmans_dirs]) == 0
    assert (tmp_path / "from-config" / "hvmans-cafe.report.csv").exists()
    # explicit flags override the config file
    assert main(["analyze", *hvmans_dirs, "--out", str(tmp_path / "flag"), "--format", "text"]) == 0
    assert "known trackers: 7" in (tmp_path / "flag" / "hvmans-cafe.report.txt").read_text()


def test_bad_bundle_exit_1(tmp_path, capsys):
    (tmp_path / "b").mkdir()
    assert main(["analyze", str(tmp_path / "b"), "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err


def test_convert(tmp_path):
    har = tmp_path / "s.har"
    har.write_text(json.dumps(_har()))
    meta = tmp_path / "meta.json"
    meta.write_text(json.dumps({"hotspot_id": "cafe", "page_type": "captive_portal",
                                "collected_at": "2019-03-01T12:00:00Z"}))
    out = tmp_path / "bundle"
    assert main(["convert", str(har), "--meta", str(meta), "--out", str(out),
                 "--consent-at", "2019-03-01T12:00:00.500Z"]) == 0
    bundle = load_bundle(out)
    assert bundle.meta.consent_at == T0 + 500
    assert main(["convert", str(har), "--meta", str(meta), "--out", str(out)]) == 1  # not empty


def test_report_and_prevalence(tmp_path, hvmans_dirs, capsys):
    out = tmp_path / "o"
    assert main(["analyze", *hvmans_dirs, *_filters(), "--out", str(out)]) == 0
    assert main(["report", str(out / "hvmans-cafe.report.json"), "--format", "text", "--summary"]) == 0
    printed = capsys.readouterr().out
    assert "third-party domains: 34" in printed and '"hotspots": 1' in printed
    corpus = tmp_path / "c.jsonl"
    corpus.write_text('{"site": "a.ca", "cookie_domain": ".instagram.com"}\n' * 3)
    assert main(["prevalence", str(out / "hvmans-cafe.report.json"), "--corpus", str(corpus)]) == 0
    assert json.loads(capsys.readouterr().out) == {"instagram.com": 3}


def test_domdiff_cli(tmp_path, capsys):
    honey = DATA / "honeysite"
    observed = tmp_path / "obs.html"
    observed.write_bytes((honey / "dynamic.html").read_bytes().replace(
        b"</body>", b'<script src="http://evil.example/x.js"></script></body>'))
    assert main(["domdiff", str(honey / "dynamic.html"), str(observed), "--format", "json",
                 "--exclusions", str(honey / "exclusions.json")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["injection_suspected"] and doc["entries"][0]["severity"] == "high"
    bad = tmp_path / "bad.txt"
    bad.write_text("div > p\n")
    assert main(["domdiff", str(honey / "dynamic.html"), str(observed), "--exclusions", str(bad)]) == 1


def test_compare_cli(tmp_path, capsys):
    default, protected, survivors = anti_tracking_pair()
    d = save_bundle(default, tmp_path / "d")
    p = save_bundle(protected, tmp_path / "p")
    assert main(["compare", str(d), str(p), *_filters()]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["protected"][0]["domains"] == survivors
    assert main(["compare", str(d), str(d), *_filters()]) == 1  # default mode is not a protection
