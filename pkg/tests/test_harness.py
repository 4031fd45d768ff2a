import json
import math

import numpy as np
import pytest

from anls import dynamics as D
from anls import harness as H

SMALL = """
[grid]
n = 8
[noise]
delta = 0.5
[evolve]
T = 0.02
dt = 0.005
snapshot_stride = 2
[probes]
samples = 3
heat_gammas = 0.5, 1.0
[manybody]
N_list = 2
T = 0.04
"""


@pytest.fixture
def small():
    return H.parse_config(SMALL)


@pytest.fixture
def cache(tmp_path, monkeypatch):
    d = tmp_path / "cache"
    monkeypatch.setenv(H.CACHE_ENV, str(d))
    return d


def run(sub, cfg, out, **kw):
    return H.run_subcommand(sub, cfg, out, report=None, **kw)


# --- configuration -----------------------------------------------------------------------


def test_defaults():
    cfg = H.parse_config("")
    assert cfg == H.ExperimentConfig()
    assert (cfg.grid.d, cfg.grid.n, cfg.noise.delta, cfg.cutoffs.M) == (3, 16, 0.25, "auto")
    assert cfg.evolve.scheme == "strang" and cfg.output.formats == ["jsonlines", "dsv"]


def test_invalid_value_names_field():
    with pytest.raises(H.ConfigError) as err:
        H.parse_config("[evolve]\ndt = 0\n")
    assert any("evolve.dt" in p for p in err.value.problems)


def test_all_problems_reported():
    text = "[grid]\nn = 7\n[evolve]\ndt = -1\nscheme = euler\n[extra]\na = 1\n[noise]\ncolour = red\n"
    with pytest.raises(H.ConfigError) as err:
        H.parse_config(text)
    msg = " ".join(err.value.problems)
    for needle in ("evolve.dt", "scheme", "[extra]", "noise.colour", "grid"):
        assert needle in msg


def test_unparseable_value():
    with pytest.raises(H.ConfigError) as err:
        H.parse_config("[grid]\nn = many\n")
    assert "grid.n" in err.value.problems[0]


def test_round_trip(small):
    small.noise.delta = 0.1 + 0.2  # not exactly representable in short form
    small.cutoffs.M = 2
    small.probes.strichartz_pairs = [(4.0, 3.0), (10 / 3, 10 / 3)]
    back = H.parse_config(H.serialize_config(small))
    assert back == small and back.digest() == small.digest()


def test_validate_returns_violations(small):
    assert H.validate(small) == []
    small.manybody.N_list = [0]
    small.potential.beta = 5.0
    assert len(H.validate(small)) >= 2


# --- export ----------------------------------------------------------------------------


def test_empty_dsv_is_header_only(tmp_path):
    p = H.export([], tmp_path / "x.tsv", "dsv", H.REPORT_COLUMNS)
    assert p.read_bytes() == ("\t".join(H.REPORT_COLUMNS) + "\n").encode()
    assert H.import_records(p, "dsv") == []
    assert H.export([], tmp_path / "x.jsonl", "jsonlines").read_text() == ""


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        H.export([{"a": 1}], tmp_path / "x", "csv")


@pytest.mark.parametrize("fmt", H.FORMATS)
def test_report_round_trip_is_lossless(tmp_path, fmt):
    rng = np.random.default_rng(0)
    reports = [D.ObservableReport(*rng.standard_normal(7) * 10.0 ** rng.integers(-12, 12, 7), besov={"b1": math.pi}) for _ in range(5)]
    reports[0].E1 = float("nan")
    p = H.export([r.record() for r in reports], tmp_path / "r", fmt, H.REPORT_COLUMNS)
    back = [H.report_from_record(rec) for rec in H.import_records(p, fmt)]
    for a, b in zip(reports, back):
        for c in H.REPORT_COLUMNS:
            x, y = getattr(a, c), getattr(b, c)
            assert (math.isnan(x) and math.isnan(y)) or x == y
        assert b.besov == a.besov


def test_dsv_header_exact(tmp_path):
    p = H.export([{"t": 0.0, "mass": 1.0, "E0": 2.0, "E1": 3.0, "E1_tilde": 4.0, "domain_norm": 5.0, "form_norm": 6.0}], tmp_path / "r.tsv", "dsv", H.REPORT_COLUMNS)
    assert p.read_bytes().split(b"\n")[0] == b"t\tmass\tE0\tE1\tE1_tilde\tdomain_norm\tform_norm"


def test_manifest_json_round_trip():
    m = H.RunManifest("enhance", "abc", "0.1.0", stages=[{"name": "x", "seconds": 1.5, "status": "ok"}])
    assert H.RunManifest.from_json(m.to_json()) == m


# --- subcommands -----------------------------------------------------------------------


def test_enhance_reproducible(tmp_path, small):
    a, _ = run("enhance", small, tmp_path / "a")
    b, _ = run("enhance", small, tmp_path / "b")
    assert a.files == b.files and a.files["enhancement.bin"]
    assert a.config_hash == small.digest() and a.status == "ok"
    on_disk = H.RunManifest.from_json((tmp_path / "a" / "manifest.json").read_text())
    assert on_disk.files == a.files


def test_spectrum_rows(tmp_path, small):
    small.noise.mollifier = "none"
    m, _ = run("spectrum", small, tmp_path)
    rows = H.import_records(tmp_path / "spectrum.jsonl", "jsonlines")
    assert rows[0]["eigenvalue"] == pytest.approx(1.0) and max(r["residual"] for r in rows) < 1e-8
    cal = H.import_records(tmp_path / "calibration.tsv", "dsv")[0]
    assert (cal["M"], cal["N"], cal["K"]) == (0, 0, 1.0)


def test_evolve_then_probe_hits_cache(tmp_path, small, cache):
    m1, _ = run("evolve", small, tmp_path / "evolve")
    assert m1.cache["misses"] >= 1
    rows = H.import_records(tmp_path / "evolve" / "observables.jsonl", "jsonlines")
    assert len(rows) == 3 and abs(rows[-1]["mass"] - rows[0]["mass"]) < 1e-10
    m2, _ = run("probe", small, tmp_path / "probe")
    assert m2.cache["hits"] >= 1 and m2.cache["misses"] == 0
    probes = H.import_records(tmp_path / "probe" / "probes.jsonl", "jsonlines")
    assert [p["kind"] for p in probes] == ["strichartz", "heat", "heat"]


def test_cached_context_matches_fresh(tmp_path, small, cache):
    run("spectrum", small, tmp_path / "a")
    run("spectrum", small, tmp_path / "b")
    a = (tmp_path / "a" / "spectrum.tsv").read_bytes()
    assert a == (tmp_path / "b" / "spectrum.tsv").read_bytes()


def test_explicit_cutoffs_warn(tmp_path, small):
    from anls import anderson as A
    from anls.noise import MollifierSpec, enhance_from_seed
    from anls.spectral import Grid

    # M = 0 gives a Theta factor of about 0.19 here, above the 0.15 threshold
    ench = enhance_from_seed(1, Grid(3, 16), MollifierSpec("sharp", 1 / 16))
    ctx = A.OperatorContext(ench, 0, 0, tol=A.Tolerances(contraction=0.15))
    r = H.Run("spectrum", small, tmp_path)
    with pytest.warns(RuntimeWarning, match="Theta contraction"):
        r._contraction_check(ctx)
    r.stage("check", lambda: r._contraction_check(ctx))
    assert any("Theta contraction" in w for w in r.manifest.warnings)


def test_manybody_outputs(tmp_path, small):
    m, _ = run("manybody", small, tmp_path)
    rows = H.import_records(tmp_path / "manybody.jsonl", "jsonlines")
    assert rows[0]["N"] == 2 and abs(rows[0]["final_mass"] - 1.0) < 1e-10
    assert not any("Unresolved" in w and "stage" not in w for w in m.warnings)


def test_verify_fast(tmp_path):
    cfg = H.parse_config("[noise]\nmollifier = none\n[grid]\nn = 8\n")
    m, ok = run("verify", cfg, tmp_path)
    assert ok and m.status == "ok" and all(c["passed"] for c in m.checks)


def test_unknown_subcommand(tmp_path, small):
    with pytest.raises(ValueError):
        run("plot", small, tmp_path)


def test_failed_run_writes_manifest(tmp_path, small, monkeypatch):
    def boom(run):
        raise RuntimeError("stage exploded")

    monkeypatch.setattr(H, "cmd_enhance", boom)
    with pytest.raises(RuntimeError):
        run("enhance", small, tmp_path)
    assert json.loads((tmp_path / "manifest.json").read_text())["status"] == "failed"


# --- command line ----------------------------------------------------------------------------


def test_cli_config_error_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[evolve]\ndt = 0\n")
    assert H.main(["evolve", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "evolve.dt" in capsys.readouterr().err


def test_cli_runs(tmp_path, capsys):
    p = tmp_path / "small.ini"
    p.write_text(SMALL)
    assert H.main(["enhance", "--config", str(p), "--out", str(tmp_path / "o"), "--seed", "7"]) == 0
    assert "manifest" in capsys.readouterr().out
    assert H.main(["enhance", "--config", str(p), "--seed", "-1"]) == 2


def test_inline_comments():
    cfg = H.parse_config("[noise]\nmollifier = sharp   ; rough noise\ndelta = 0.125 # dyadic\n")
    assert (cfg.noise.mollifier, cfg.noise.delta) == ("sharp", 0.125)
