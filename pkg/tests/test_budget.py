"""Ground-truth step accounting: fragments, buckets, report arithmetic."""

import json

import pytest

from tenseg.budget import (FULL_CONFIG, _bucket, collect, report,
                           write_fragment)


def test_fragment_write_collect_round_trip(tmp_path):
    write_fragment(tmp_path, "gen-hang", {"hang": 5000, "settle": 2500})
    write_fragment(tmp_path, "gen-throw", {"throw": 5000})
    write_fragment(tmp_path, "gen-throw2", {"throw": 1000})
    (tmp_path / "notes.json").write_text("{}")       # ignored: no prefix
    merged = collect(tmp_path)
    assert merged == {"hang": 5000, "settle": 2500, "throw": 6000}


def test_fragment_rewrite_is_byte_identical(tmp_path):
    p1 = write_fragment(tmp_path, "a", {"b": 2, "a": 1})
    data1 = open(p1, "rb").read()
    p2 = write_fragment(tmp_path, "a", {"a": 1, "b": 2})
    assert open(p2, "rb").read() == data1


def test_bucket_rules():
    assert _bucket("hang") == "c_pe"
    assert _bucket("throw") == "c_pe"
    assert _bucket("rest") == "c_pe"
    assert _bucket("settle") == "c_pe"
    assert _bucket("sysid-extra") == "c_pe"
    assert _bucket("throw-train") == "c_pe"
    assert _bucket("hang-validation") == "c_pe"
    assert _bucket("policy-training") == "c_rl"
    assert _bucket("policy-init") == "c_rl"
    assert _bucket("policy-eval") == "evaluation"
    assert _bucket("throw-test") == "evaluation"
    assert _bucket("run42/policy-training") == "c_rl"
    assert _bucket("mystery") == "other"


def test_report_arithmetic():
    merged = {"hang": 5000, "throw": 5000, "settle": 3000,
              "throw-test": 50000, "policy-training": 400000,
              "policy-eval": 10000, "mystery": 7}
    rep = report(merged, robot="sixbar")
    assert rep["c_pe"] == 13000
    assert rep["c_gt"] == 0
    assert rep["c_rl"] == 400000
    assert rep["evaluation_steps"] == 60000
    assert rep["other_steps"] == 7
    assert rep["ratio"] == pytest.approx(13000 / 400000)
    # published-config extrapolation: 10k vs 20 policies x 40 iter x 5k
    assert rep["extrapolated"]["ratio"] == pytest.approx(0.0025)
    assert FULL_CONFIG["sixbar"]["c_rl"] == 4_000_000
    assert FULL_CONFIG["threebar"]["c_rl"] == 12_000_000
    rep3 = report(merged, robot="threebar")
    assert rep3["extrapolated"]["ratio"] == pytest.approx(10_000 / 12e6)
    # no direct-training arm -> undefined ratio, not a crash
    assert report({"hang": 10})["ratio"] is None


def test_report_json_serializable(tmp_path):
    rep = report({"hang": 1, "policy-training": 2})
    s = json.dumps(rep, sort_keys=True)
    assert json.loads(s) == rep
