import csv
import io
import json

import pytest

from scg import experiment as ex
from scg import fixtures as fx
from scg.cli import main


def _cfg(fixture, estimators, samples=20_000, seed=1):
    return {"fixture": fixture, "estimators": estimators, "samples": samples, "seed": seed}


# ---------------------------------------------------------------- run_experiment

def test_chain2_menu_passes_its_gates():
    rows, ok = ex.run_experiment(ex.builtin_config("CHAIN2", samples=20_000))
    assert ok
    assert [r.id for r in rows] == sorted(d["id"] for d in ex.MENUS["CHAIN2"])
    for r in rows:
        assert r.exact_mean == pytest.approx(r.exact_gradient, abs=1e-10)
        assert r.gate is True


def test_empty_menu_gives_header_only():
    rows, ok = ex.run_experiment(_cfg("CHAIN2", []))
    assert rows == [] and ok
    assert ex.rows_to_csv(rows) == ",".join(ex.HEADER) + "\n"


def test_noise_menu_variance_ordering():
    rows, _ = ex.run_experiment(ex.builtin_config("NOISE", samples=2_000))
    var = {r.id: r.exact_var for r in rows}
    assert var["noise-critic-z"] == pytest.approx(var["noise-critic-zzp-base-zp"], abs=1e-12)
    assert var["noise-critic-zzp"] > 100 * var["noise-critic-z"]
    assert var["noise-noncongruent"] > 100 * var["noise-critic-z"]


def test_same_config_and_seed_gives_identical_csv():
    cfg = ex.builtin_config("CHAIN2-G", samples=5_000, seed=3)
    a = ex.rows_to_csv(ex.run_experiment(cfg)[0])
    b = ex.rows_to_csv(ex.run_experiment(cfg)[0])
    assert a == b
    c = ex.rows_to_csv(ex.run_experiment({**cfg, "seed": 4})[0])
    assert c != a


def test_every_menu_entry_is_unbiased_in_expectation():
    for name in ex.MENUS:
        rows, _ = ex.run_experiment(ex.builtin_config(name, samples=200))
        for r in rows:
            assert r.exact_mean == pytest.approx(r.exact_gradient, abs=1e-8), r.id


def test_inline_graph_config():
    doc = fx.fig11b().graph.to_json()
    rows, ok = ex.run_experiment({"graph": doc, "inputs": {"x": 1.0}, "estimators": [{"id": "plain"}], "samples": 5})
    assert ok
    assert rows[0].mc_mean == 32.0 and rows[0].stderr == 0.0


def test_value_store_file_source(tmp_path):
    from scg import exact_oracle as eo
    from scg import value_store as vs

    f = fx.chain2()
    table = eo.enumerate_support(f.graph, f.inputs)
    vf, _ = vs.fit_on_return(f.graph, table.atoms, ["s0", "a0"], "a0", weights=table.prob)
    path = tmp_path / "q.json"
    path.write_text(vs.dumps(vf))
    est = {"id": "from-file", "nodes": [
        {"node": "a0", "critic": {"type": "value", "set": ["s0", "a0"], "source": {"kind": "file", "path": str(path)}}}]}
    rows, ok = ex.run_experiment(_cfg("CHAIN2", [est], samples=5_000))
    assert ok
    assert rows[0].exact_mean == pytest.approx(rows[0].exact_gradient, abs=1e-8)


# ---------------------------------------------------------------- config errors

@pytest.mark.parametrize("cfg, fragment", [
    ({"fixture": "CHAIN2"}, "estimators"),
    ({"fixture": "NOPE", "estimators": []}, "fixture"),
    ({"fixture": "CHAIN2", "estimators": [], "bogus": 1}, "bogus"),
    ({"fixture": "CHAIN2", "estimators": [{"id": "x", "nodes": [{"node": "a0", "critic": {"type": "magic"}}]}]},
     "estimators/0/nodes/0/critic/type"),
    ({"fixture": "CHAIN2", "estimators": [], "samples": 0}, "samples"),
    ({"estimators": []}, "<root>"),
])
def test_schema_errors(cfg, fragment):
    with pytest.raises(ex.ConfigError) as info:
        ex.validate_config(cfg)
    assert fragment in str(info.value)


def test_unknown_builtin_menu():
    with pytest.raises(ex.ConfigError):
        ex.builtin_config("NOPE")


def test_malformed_inline_graph():
    with pytest.raises(ex.ConfigError):
        ex.run_experiment({"graph": {"nodes": [{"name": "a", "kind": "deterministic", "parents": ["b"]}]},
                           "estimators": []})


def test_json_syntax_error_reports_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"fixture": "CHAIN2",\n "estimators": [}\n')
    with pytest.raises(ex.ConfigError) as info:
        ex.load_config(str(p))
    assert "line 2" in str(info.value)


# ---------------------------------------------------------------- CLI

def test_cli_analyze_fixture(capsys):
    assert main(["analyze", "CHAIN2", "--node", "a0", "--set", "mine=s0,a0"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["node"] == "a0"
    assert "mine" in json.dumps(report)


def test_cli_analyze_all_nodes_of_a_file(tmp_path, capsys):
    p = tmp_path / "g.json"
    p.write_text(json.dumps(fx.fig11b().graph.to_json()))
    assert main(["analyze", str(p)]) == 0
    assert len(json.loads(capsys.readouterr().out)) == 6


def test_cli_analyze_unknown_node(capsys):
    assert main(["analyze", "CHAIN2", "--node", "ghost"]) == 2


def test_cli_fixtures(capsys):
    assert main(["fixtures"]) == 0
    out = capsys.readouterr().out
    assert all(name in out for name in fx.fixture_names())
    assert main(["fixtures", "--dump", "FIG11B"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["inputs"] == {"x": 1.0}
    assert [n["name"] for n in doc["nodes"]] == ["x", "v1", "v2", "v3", "v4", "l"]
    assert main(["fixtures", "--dump", "NOPE"]) == 2


def test_cli_estimate_writes_csv(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(_cfg("CHAIN2", ex.MENUS["CHAIN2"][:2], samples=5_000)))
    out = tmp_path / "rows.csv"
    assert main(["estimate", str(cfg), "-o", str(out)]) == 0
    rows = list(csv.reader(io.StringIO(out.read_text())))
    assert rows[0] == ex.HEADER and len(rows) == 3
    assert {r[-1] for r in rows[1:]} == {"pass"}


def test_cli_estimate_builtin_json(tmp_path):
    out = tmp_path / "rows.json"
    assert main(["estimate", "TREE4", "--builtin", "--samples", "2000", "-o", str(out)]) == 0
    rows = json.loads(out.read_text())
    assert rows[0]["id"] == "tree4-valid" and rows[0]["gate"] is True


def test_cli_estimate_error_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"fixture": "CHAIN2", "estimators": [], "bogus": 1}))
    assert main(["estimate", str(bad)]) == 2
    refused = tmp_path / "refused.json"
    refused.write_text(json.dumps(_cfg("TREE4", [{"id": "bad", "nodes": [
        {"node": "v1", "critic": {"type": "value", "set": ["v1"]}}]}])))
    assert main(["estimate", str(refused)]) == 2
    assert "refused" in capsys.readouterr().err
    assert main(["estimate", str(tmp_path / "missing.json")]) == 2


def test_cli_verify_list(capsys):
    assert main(["verify", "--list"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [l.split()[0] for l in lines] == [f"C{i}" for i in range(1, 11)]


def test_cli_verify_single_criterion(capsys):
    assert main(["verify", "--only", "C8"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["verify", "--only", "C99"]) == 2
