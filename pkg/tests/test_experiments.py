import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from pfqn import cli
from pfqn.errors import ConfigError, TableTooLarge, TopologyError
from pfqn.experiments import (
    ExperimentSpec,
    ResultTable,
    load_network,
    parse_network,
    run_collapse,
    run_converge,
    run_exact,
    run_pf,
    run_rates,
    sample_closed_states,
    write_result,
)
from pfqn.productform import conditional_mean_packets
from pfqn.topology import Topology

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
LINEAR = CONFIGS / "linear.json"
SINGLE = CONFIGS / "single.json"


def spec(kind, path=LINEAR, **kw):
    return ExperimentSpec(kind=kind, network=load_network(path), **kw)


def test_parse_network_resolves_names():
    net = load_network(LINEAR)
    assert net.topo.routes == ((0, 1), (0,), (1,))
    np.testing.assert_allclose(net.traffic.rho, [0.25, 0.25, 0.25])
    assert net.traffic.size_dist[0].kind == "exponential"


@pytest.mark.parametrize(
    "raw",
    [
        [],
        {"queues": [1.0], "routes": [[0]], "traffic": [{"route": "nope", "nu": 1, "mu": 1}]},
        {"queues": [1.0], "routes": [[0]], "traffic": [{"route": 0, "nu": "x", "mu": 1}]},
        {"queues": [1.0], "routes": [[0], [0]], "traffic": [{"route": 0, "nu": 1, "mu": 1}]},
    ],
)
def test_parse_network_rejects(raw):
    with pytest.raises(ConfigError):
        parse_network(raw)


def test_bad_topology_is_a_config_level_error():
    with pytest.raises(TopologyError) as info:
        parse_network({"queues": [1.0], "routes": [[]]})
    assert info.value.exit_code == 2


@pytest.mark.parametrize("kw", [{"h": (1, 1)}, {"h": (4, 2)}, {"c": (0, 1)}, {"n": (1, 1)}, {"n": (1, -1, 1)}, {"replicas": 0}])
def test_spec_invariants(kw):
    with pytest.raises(ConfigError):
        spec("converge", **kw)


def test_result_table_shape():
    t = ResultTable("x", ["a", "b"])
    t.add("s", 1.0)
    with pytest.raises(ValueError):
        t.add(1)
    with pytest.raises(ValueError):
        ResultTable("y", ["a", "a"])


def test_csv_format():
    t = ResultTable("x", ["name", "int", "real"])
    t.add('has,comma "q"', 3, 0.1)
    t.add("plain", -2, float("nan"))
    text = t.to_csv()
    assert text.splitlines()[1] == '"has,comma ""q""",3,0.10000000000000001'
    assert text.endswith("\r\n")
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[1][0] == 'has,comma "q"'
    assert float(rows[1][2]) == 0.1
    assert rows[2][2] == "nan"


def test_exact_on_single_queue():
    t = run_exact(spec("exact", SINGLE, n=(1, 3)))
    np.testing.assert_allclose(t.column("lambda_sn"), [0.5, 1.5], rtol=1e-12)


def test_exact_on_linear():
    t = run_exact(spec("exact", n=(1, 1, 1)))
    assert t.column("B_n")[0] == pytest.approx(4.0, abs=1e-10)
    np.testing.assert_allclose(t.column("lambda_sn"), [0.25, 0.75, 0.75], atol=1e-10)
    assert max(t.column("little_residual_max")) < 1e-10


def test_pf_zero():
    t = run_pf(spec("pf", n=(0, 0, 0)))
    assert t.column("lambda_pf")[:3] == [0.0, 0.0, 0.0]


def test_rates_gap():
    t = run_rates(spec("rates", n=(1, 1, 1)))
    rows = {(q, n): v for q, n, v in t.rows}
    assert rows[("duality_gap", "all")] <= 1e-6
    assert rows[("alpha_dual", "all")] == pytest.approx(np.log(4 / 3) + 2 * np.log(8 / 3), abs=1e-10)


def test_converge_values():
    t = run_converge(spec("converge", n=(1, 1, 1), h=(1, 4, 64)))
    err = t.column("error")
    assert err[0] == pytest.approx(1 / 12, abs=1e-10)
    assert err[2] < err[1]
    assert err[2] <= 0.05
    single = run_converge(spec("converge", SINGLE, n=(2, 5), h=(1, 3, 10)))
    assert max(single.column("error")) < 1e-12


def test_converge_reports_largest_feasible_h():
    with pytest.raises(TableTooLarge, match="largest feasible h is 128"):
        run_converge(spec("converge", n=(1, 1, 1), h=(1, 128, 1024)))


def test_collapse_small_cases():
    t = run_collapse(spec("collapse", n=(1, 1, 1), h=(1, 2), epsilon=0.25))
    assert t.column("exceedance") == [pytest.approx(1.0), pytest.approx(12 / 21)]
    single = run_collapse(spec("collapse", SINGLE, n=(1, 2), h=(1, 5, 20)))
    assert single.column("exceedance") == [0.0, 0.0, 0.0]
    assert max(single.column("l1_max")) < 1e-12


def test_mcmc_sampler_matches_exact_means():
    topo = Topology((1.0, 2.0, 0.5), ((0, 1, 2), (0, 2), (1,)))
    n = (4, 3, 2)
    rng = np.random.default_rng(0)
    states, mode = sample_closed_states(topo, n, 40_000, rng, cap=10)
    assert mode == "mcmc"
    np.testing.assert_array_equal(topo.route_totals(states), np.broadcast_to(n, (len(states), 3)))
    np.testing.assert_allclose(states.mean(axis=0), conditional_mean_packets(topo, n), atol=0.08)


def test_write_result_is_byte_identical(tmp_path):
    s = spec("converge", n=(1, 1, 1), h=(1, 2, 8))
    write_result(run_converge(s), s, tmp_path / "a")
    write_result(run_converge(s), s, tmp_path / "b")
    for name in ("converge.csv", "meta.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    meta = json.loads((tmp_path / "a" / "meta.json").read_text())
    assert meta["seed"] == 0 and meta["experiment"] == "converge"
    assert len(meta["config_hash"]) == 64
    assert "calibration" in meta


def test_cli_writes_files(tmp_path, capsys):
    code = cli.main(["pf", "--config", str(LINEAR), "--n", "1,1,1", "--out", str(tmp_path)])
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "pf.csv", newline="")))
    assert float(rows[0]["lambda_pf"]) == pytest.approx(1 / 3, abs=1e-8)


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["validate", "--config", str(bad)]) == 2
    empty = tmp_path / "empty.json"
    empty.write_text(json.dumps({"queues": [1], "routes": [[]]}))
    assert cli.main(["validate", "--config", str(empty)]) == 2
    assert cli.main(["converge", "--config", str(LINEAR), "--n", "1,1,1", "--h", "1,1024"]) == 4
    heavy = tmp_path / "heavy.json"
    raw = json.loads(LINEAR.read_text())
    for entry in raw["traffic"]:
        entry["nu"] = 0.6
    heavy.write_text(json.dumps(raw))
    assert cli.main(["scaling", "--config", str(heavy), "--horizon", "10"]) == 3
    assert cli.main(["validate", "--config", str(LINEAR)]) == 0
    assert "stable,all,0,true" in capsys.readouterr().out


def test_cli_rejects_bad_lists():
    with pytest.raises(SystemExit):
        cli.main(["converge", "--config", str(LINEAR), "--h", "1,x"])
