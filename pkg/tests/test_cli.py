import csv
import math
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from npqcd import config as cfgmod
from npqcd.cli import main, oc_svg, qcheck_svg, read_csv

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"
SMOKE = CONFIGS / "smoke"
GOLDEN = Path(__file__).resolve().parent / "golden"


def run(*argv):
    return main([str(a) for a in argv])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


@pytest.fixture(scope="module")
def smoke_oc(tmp_path_factory):
    out = tmp_path_factory.mktemp("oc")
    assert run("oc", SMOKE / "oc.toml", "--out", out) == 0
    return out


def test_oc_outputs_and_schema(smoke_oc):
    header = (smoke_oc / "oc_curve.csv").read_text().splitlines()[0]
    assert header == "detector,b,mrl,mrl_se,delay,delay_se,trunc_frac,trials"
    assert (smoke_oc / "trials.csv").read_text().splitlines()[0] == "detector,b,seed,nu,tau,truncated"
    names = {r["detector"] for r in rows(smoke_oc / "oc_curve.csv")}
    assert names == {"CuSum", "GLR m=10", "NGLR m=10", "NWLA w=8", "NWLA policy", "parallel NWLA"}
    ET.fromstring((smoke_oc / "oc_curve.svg").read_text())


def test_oc_numbers_have_17_digits(smoke_oc):
    r = rows(smoke_oc / "oc_curve.csv")[0]
    assert float(r["mrl"]) == float(f"{float(r['mrl']):.17g}")
    assert r["mrl"] == f"{float(r['mrl']):.17g}"


def test_oc_matches_golden(smoke_oc):
    for name in ("oc_curve.csv", "trials.csv"):
        assert (smoke_oc / name).read_bytes() == (GOLDEN / "smoke_oc" / name).read_bytes(), name


def test_oc_rerun_and_threads_are_byte_identical(smoke_oc, tmp_path):
    assert run("oc", SMOKE / "oc.toml", "--out", tmp_path, "--threads", "3") == 0
    for name in ("oc_curve.csv", "trials.csv"):
        assert (tmp_path / name).read_bytes() == (smoke_oc / name).read_bytes()


def test_oc_seed_override_changes_output(smoke_oc, tmp_path):
    assert run("oc", SMOKE / "oc.toml", "--out", tmp_path, "--seed", "12") == 0
    assert (tmp_path / "oc_curve.csv").read_bytes() != (smoke_oc / "oc_curve.csv").read_bytes()


def test_trials_csv_rows(smoke_oc):
    trials = rows(smoke_oc / "trials.csv")
    cusum = [r for r in trials if r["detector"] == "CuSum" and r["b"] == "1"]
    assert len(cusum) == 80  # 40 trials at nu=inf plus 40 at nu=1
    assert {r["nu"] for r in cusum} == {"inf", "1"}
    assert all(r["truncated"] in ("true", "false") for r in trials)


def test_svg_is_rendered_from_csv_rows_only(smoke_oc):
    regenerated = oc_svg(read_csv(smoke_oc / "oc_curve.csv"))
    assert regenerated == (smoke_oc / "oc_curve.svg").read_text()


def test_qcheck_smoke(tmp_path):
    assert run("qcheck", SMOKE / "qcheck.toml", "--out", tmp_path) == 0
    got = (tmp_path / "qcheck.csv").read_bytes()
    assert got == (GOLDEN / "smoke_qcheck" / "qcheck.csv").read_bytes()
    for r in rows(tmp_path / "qcheck.csv"):
        assert float(r["margin"]) == pytest.approx(math.log(float(r["q_estimate"])) - 3 * math.log(float(r["m"])),
                                                   rel=1e-15, abs=1e-15)
    assert qcheck_svg(read_csv(tmp_path / "qcheck.csv")) == (tmp_path / "qcheck.svg").read_text()
    assert run("qcheck", SMOKE / "qcheck.toml", "--out", tmp_path / "t", "--threads", "4") == 0
    assert (tmp_path / "t" / "qcheck.csv").read_bytes() == got


def test_qcheck_single_m(tmp_path):
    text = (SMOKE / "qcheck.toml").read_text().replace("m = [2, 5, 10]", "m = [2]")
    assert run("qcheck", write(tmp_path, text), "--out", tmp_path) == 0
    assert len(rows(tmp_path / "qcheck.csv")) == 1


def test_mixture_qcheck_recipe_has_six_series(tmp_path):
    text = (CONFIGS / "qcheck_gaussian_and_mixtures.toml").read_text()
    text = text.replace("m_stop = 100", "m_stop = 10").replace("trials = 10000", "trials = 20")
    assert run("qcheck", write(tmp_path, text), "--out", tmp_path) == 0
    r = rows(tmp_path / "qcheck.csv")
    assert len({x["series"] for x in r}) == 6
    assert len(r) == 12


def test_nglr_oc_recipe_series():
    cfg = cfgmod.load(CONFIGS / "oc_nglr.toml")
    specs = cfgmod.parse_detectors(cfg)
    assert {s.algorithm for s in specs} == {"cusum", "glr", "nglr"}
    models = cfgmod.parse_models(cfg)
    nglr = next(s for s in specs if s.algorithm == "nglr")
    det = nglr.build(models["pre"], models["post"], nglr.thresholds[0])
    assert det.bandwidth.h == pytest.approx(10 ** -0.2, rel=1e-15)


def test_nglr_oc_recipe_runs_shortened(tmp_path):
    text = (CONFIGS / "oc_nglr.toml").read_text().replace("trials = 1000", "trials = 4")
    text += "\n"  # keep the thresholds: cheap with 4 trials and a tight max_len
    text = text.replace("max_len_delay = 10000", "max_len_delay = 500\nmax_len_mrl = 500")
    assert run("oc", write(tmp_path, text), "--out", tmp_path) == 0
    algos = {r["detector"].split()[0] for r in rows(tmp_path / "oc_curve.csv")}
    assert algos == {"CuSum", "GLR", "NGLR"}


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.toml")))
def test_shipped_configs_parse(name):
    cfg = cfgmod.load(CONFIGS / name)
    assert isinstance(cfg["seed"], int)
    cfgmod.parse_models(cfg)
    if "detectors" in cfg:
        for spec in cfgmod.parse_detectors(cfg):
            assert spec.thresholds == sorted(spec.thresholds)


def test_kdeloss_rows_and_slope(tmp_path):
    assert run("kdeloss", SMOKE / "kdeloss.toml", "--out", tmp_path) == 0
    r = rows(tmp_path / "kdeloss.csv")
    assert [x["w"] for x in r] == ["10", "40", "slope"]
    ws = [10.0, 40.0]
    for col in ("kl_loss", "second_moment"):
        fit = np.polyfit(np.log(ws), np.log([float(x[col]) for x in r[:2]]), 1)[0]
        assert float(r[2][col]) == pytest.approx(fit, rel=1e-12)
    assert (tmp_path / "kdeloss.csv").read_bytes() == (GOLDEN / "smoke_kdeloss" / "kdeloss.csv").read_bytes()


def test_kdeloss_single_w_has_no_slope_row(tmp_path):
    text = (SMOKE / "kdeloss.toml").read_text().replace("w = [10, 40]", "w = [10]")
    assert run("kdeloss", write(tmp_path, text), "--out", tmp_path) == 0
    assert [x["w"] for x in rows(tmp_path / "kdeloss.csv")] == ["10"]


def test_solve_prints_policy_values(capsys):
    assert run("solve", "--alpha", "0.01", "--varsigma", "0") == 0
    out = dict(line.split("=") for line in capsys.readouterr().out.split())
    assert float(out["nglr_threshold"]) == pytest.approx(6.684612, abs=1e-6)
    assert float(out["kappa_star"]) == 5 / 9 and float(out["rho_star"]) == 4 / 9
    assert run("solve", "--alpha", str(math.exp(-1))) == 0
    out = dict(line.split("=") for line in capsys.readouterr().out.split())
    assert float(out["nwla_threshold"]) == pytest.approx(1.0, abs=1e-15)


def test_solve_flags(capsys):
    assert run("solve", "--alpha", "1e-4", "--eta", "1.2", "--divergence", "0.125", "--kappa", "0.5",
               "--max-window", "10", "--seed", "1", "--threads", "2") == 0
    out = dict(line.split("=") for line in capsys.readouterr().out.split())
    b = float(out["nglr_threshold"])
    assert int(out["nglr_window"]) == math.ceil(1.2 * b / 0.125)
    assert int(out["nwla_window"]) == math.ceil(math.log(1e4) ** 0.5)


def test_config_errors_exit_1(tmp_path, capsys):
    text = (SMOKE / "oc.toml").read_text()
    head = text.split("[[detectors]]")[0]
    assert run("oc", write(tmp_path, head, "empty.toml"), "--out", tmp_path) == 1
    assert "detectors" in capsys.readouterr().err
    assert run("oc", write(tmp_path, text.replace("seed = 11\n", ""), "noseed.toml"), "--out", tmp_path) == 1
    assert "seed" in capsys.readouterr().err
    bad = text.replace('algorithm = "glr"', 'algorithm = "bogus"')
    assert run("oc", write(tmp_path, bad, "bad.toml"), "--out", tmp_path) == 1
    assert "algorithm" in capsys.readouterr().err
    assert run("oc", write(tmp_path, "seed = [", "broken.toml")) == 1
    assert run("oc", tmp_path / "missing.toml") == 1
    assert run("solve") == 1
    assert run("solve", "--alpha", "2") == 1
    assert run("solve", "--alpha", "0.1", "--eta", "0.9") == 1


def test_numeric_failure_exit_2(tmp_path, capsys):
    text = (SMOKE / "kdeloss.toml").read_text().replace(
        'bandwidth = { mode = "power", c = 1.0, exponent = 0.2 }',
        'bandwidth = { mode = "fixed", h = 0.001 }\nclip_floor = 0.0')
    assert run("kdeloss", write(tmp_path, text), "--out", tmp_path) == 2
    assert "numeric" in capsys.readouterr().err


def test_nu_list_writes_one_table_per_change_point(smoke_oc, tmp_path):
    text = (SMOKE / "oc.toml").read_text().replace("nu = 1", "nu = [1, 50]")
    assert run("oc", write(tmp_path, text), "--out", tmp_path) == 0
    assert (tmp_path / "oc_curve.csv").read_bytes() == (smoke_oc / "oc_curve.csv").read_bytes()
    first, later = rows(tmp_path / "oc_curve.csv"), rows(tmp_path / "oc_curve_nu50.csv")
    assert [r["mrl"] for r in first] == [r["mrl"] for r in later]
    assert [r["delay"] for r in first] != [r["delay"] for r in later]
    assert later[0]["delay"] == "nan"  # CuSum at b=1 always alarms before the change at 50
    nus = {r["nu"] for r in rows(tmp_path / "trials.csv")}
    assert nus == {"inf", "1", "50"}
    assert run("oc", write(tmp_path, text.replace("[1, 50]", "[1, 1]"), "dup.toml")) == 1
    assert run("oc", write(tmp_path, text.replace("[1, 50]", "0"), "zero.toml")) == 1


def test_dominance_diagnostics_pass_on_smoke(smoke_oc, tmp_path, caplog):
    text = (SMOKE / "oc.toml").read_text().replace("write_trials = true", "diagnostics = true")
    with caplog.at_level("INFO", logger="npqcd"):
        assert run("oc", write(tmp_path, text), "--out", tmp_path) == 0
    assert (tmp_path / "oc_curve.csv").read_bytes() == (smoke_oc / "oc_curve.csv").read_bytes()
    passed = [r for r in caplog.records if "dominance diagnostics passed" in r.getMessage()]
    assert len(passed) == 3  # "NWLA w=8" and both policy windows; parallel is not checked
