import csv
import json

import pytest

from hestonvi.cli import BENCHMARK, main


def _config(tmp_path, **over):
    doc = json.loads(json.dumps(BENCHMARK))
    doc["grid"] = {"n_x": 31, "n_y": 31}
    doc["solve"] = {"maturity": 0.5, "n_t": 10}
    for k, v in over.items():
        doc[k] = v
    path = tmp_path / "run.json"
    path.write_text(json.dumps(doc))
    return str(path)


def _run(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_price_summary(tmp_path, capsys):
    cfg = _config(tmp_path)
    code, out, _ = _run(["price", "--config", cfg, "--out", str(tmp_path / "a")], capsys)
    assert code == 0
    s = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert s["schema"] == 1
    price = s["price"]["spot_convention"]["value"]
    assert 3.0 < price < 7.0
    assert s["penalty_violation"] < 1e-3 * 100
    assert s["price"]["shifted_convention"]["cbar"] == pytest.approx(0.05 + 0.5 * 2 * 0.04 / 0.3)
    assert s["config"]["solve"]["epsilon"] == pytest.approx(1e-4)
    assert set(s["energy_constants"]) == {"delta0", "delta1", "K1", "lambda_min"}
    assert json.loads(out)["price"] == price
    with open(tmp_path / "a" / "surface.csv") as fh:
        assert next(csv.reader(fh)) == ["t", "x", "y", "u", "exercise"]


def test_price_rerun_is_byte_identical(tmp_path, capsys):
    cfg = _config(tmp_path)
    for d in ("a", "b"):
        assert _run(["price", "--config", cfg, "--out", str(tmp_path / d)], capsys)[0] == 0
    for f in ("summary.json", "surface.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_zero_payoff_prices_to_zero(tmp_path, capsys):
    cfg = _config(tmp_path, payoff={"kind": "zero"})
    assert _run(["price", "--config", cfg, "--out", str(tmp_path)], capsys)[0] == 0
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["price"]["spot_convention"]["value"] == 0.0


def test_bad_weights_exit_2_with_field(tmp_path, capsys):
    cfg = _config(tmp_path, weights={"gamma": 4.0, "mu": 0.0})
    code, _, err = _run(["price", "--config", cfg, "--out", str(tmp_path)], capsys)
    assert code == 2 and "weights.mu" in err


@pytest.mark.parametrize("over,field", [({"model": {"kappa": -1.0, "theta": 0.04, "sigma": 0.3,
                                                   "rho": 0.0}}, "model.kappa"),
                                        ({"solve": {"maturity": 0.5, "n_t": 0}}, "solve.n_t"),
                                        ({"solve": {"maturity": 0.5, "speed": 1}}, "solve.speed"),
                                        ({"y0": -0.1}, "y0")])
def test_config_errors_name_the_field(tmp_path, capsys, over, field):
    code, _, err = _run(["price", "--config", _config(tmp_path, **over), "--out", str(tmp_path)],
                        capsys)
    assert code == 2 and field in err


def test_unknown_suite_and_bad_json(tmp_path, capsys):
    assert _run(["verify", "--suite", "nope", "--out", str(tmp_path)], capsys)[0] == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, _, err = _run(["price", "--config", str(bad), "--out", str(tmp_path)], capsys)
    assert code == 2 and "--config" in err


def test_bad_thread_env_exit_2(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("PRICER_THREADS", "0")
    code, _, err = _run(["price", "--config", _config(tmp_path), "--out", str(tmp_path)], capsys)
    assert code == 2 and "PRICER_THREADS" in err


def _verify(tmp_path, capsys, suite, **over):
    cfg = _config(tmp_path, **over)
    code, out, _ = _run(["verify", "--suite", suite, "--config", cfg, "--out", str(tmp_path)], capsys)
    rep = json.loads((tmp_path / f"verify_{suite}.json").read_text())
    return code, out, rep


def test_verify_density(tmp_path, capsys):
    code, out, rep = _verify(tmp_path, capsys, "density", mc={"n_paths": 20_000, "seed": 1})
    assert code == 0 and rep["passed"]
    assert rep["suite"] == "density"
    for c in rep["checks"]:
        assert {"name", "property", "value", "tolerance", "passed"} <= set(c)
    assert out.count("PASS") == len(rep["checks"])


def test_verify_comparison(tmp_path, capsys):
    code, _, rep = _verify(tmp_path, capsys, "comparison", grid={"n_x": 21, "n_y": 21})
    assert code == 0 and rep["passed"]


def test_verify_semigroup(tmp_path, capsys):
    code, _, rep = _verify(tmp_path, capsys, "semigroup", mc={"n_paths": 20_000, "seed": 2})
    names = {c["name"] for c in rep["checks"]}
    assert len(names) >= 2
    assert code == (0 if rep["passed"] else 1)


def test_converge_single_level(tmp_path, capsys):
    cfg = _config(tmp_path, converge={"mode": "all", "base_n_x": 21, "base_n_y": 21, "base_n_t": 5})
    assert _run(["converge", "--config", cfg, "--levels", "1", "--out", str(tmp_path)], capsys)[0] == 0
    rows = list(csv.DictReader(open(tmp_path / "converge.csv")))
    assert len(rows) == 1 and rows[0]["diff"] == ""


def test_converge_ladder_shrinks(tmp_path, capsys):
    cfg = _config(tmp_path, converge={"mode": "all", "base_n_x": 25, "base_n_y": 25, "base_n_t": 12})
    assert _run(["converge", "--config", cfg, "--levels", "3", "--out", str(tmp_path)], capsys)[0] == 0
    rows = list(csv.DictReader(open(tmp_path / "converge.csv")))
    assert [int(r["n_x"]) for r in rows] == [25, 50, 100]
    assert abs(float(rows[2]["diff"])) < abs(float(rows[1]["diff"]))
    assert rows[2]["order"] != ""


def test_converge_epsilon_ladder(tmp_path, capsys):
    cfg = _config(tmp_path, grid={"n_x": 40, "n_y": 40}, solve={"maturity": 0.5, "n_t": 20,
                                                                  "epsilon": 0.01},
                  converge={"mode": "epsilon"})
    assert _run(["converge", "--config", cfg, "--levels", "3", "--out", str(tmp_path)], capsys)[0] == 0
    rows = list(csv.DictReader(open(tmp_path / "converge.csv")))
    v = [float(r["violation"]) for r in rows]
    assert [float(r["epsilon"]) for r in rows] == [0.01, 0.005, 0.0025]
    assert all(1.5 <= a / b <= 2.5 for a, b in zip(v, v[1:]))
