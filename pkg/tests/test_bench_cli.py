"""Benchmark harness and CLI surface tests."""

import csv
import json

import pytest

from fabsched import bench, cli, sim
from fabsched.bench import AggregateReport, BenchmarkConfig, run_benchmark, write_report
from fabsched.dispatch import make_dispatcher
from fabsched.scenario import MINUTES_PER_DAY, GeneratorConfig, generate_minifab, save_scenario


@pytest.fixture(scope="module")
def small_scenario_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("scen") / "small.json"
    save_scenario(
        generate_minifab(GeneratorConfig(families=3, groups_per_family=2, products=2,
                                         route_length=10, seed=4)),
        path,
    )
    return path


@pytest.fixture(scope="module")
def small_report(small_scenario_path):
    cfg = BenchmarkConfig(
        scenario_path=str(small_scenario_path),
        dispatchers=("fifo", "cr"),
        seed_count=3,
        base_seed=100,
        horizon=3 * MINUTES_PER_DAY,
        initial_wip=15,
    )
    return run_benchmark(cfg)


def test_paired_seed_lists_identical(small_report):
    assert small_report.seed_lists["fifo"] == small_report.seed_lists["cr"]
    assert small_report.seeds == (100, 101, 102)
    fifo_seeds = sorted({int(r["seed"]) for r in small_report.detail_rows
                         if r["dispatcher"] == "fifo"})
    cr_seeds = sorted({int(r["seed"]) for r in small_report.detail_rows
                       if r["dispatcher"] == "cr"})
    assert fifo_seeds == cr_seeds == [100, 101, 102]


def test_single_seed_stds_are_zero(small_scenario_path):
    cfg = BenchmarkConfig(
        scenario_path=str(small_scenario_path),
        dispatchers=("fifo",),
        seed_count=1,
        horizon=2 * MINUTES_PER_DAY,
        initial_wip=10,
    )
    report = run_benchmark(cfg)
    assert all(r["cost_std"] == 0.0 for r in report.cost_rows)
    assert all(r["on_time_std"] in (0.0, None) for r in report.kpi_rows)


def test_cost_rows_match_detail_components(small_report):
    for row in small_report.cost_rows:
        details = {
            int(d["seed"]): d
            for d in small_report.detail_rows
            if d["dispatcher"] == row["dispatcher"]
        }
        re_mean = sum(float(d["cost"]) for d in details.values()) / len(details)
        assert row["cost_mean"] == pytest.approx(re_mean)
        for d in details.values():
            assert float(d["cost"]) == pytest.approx(
                float(d["finished_cost"]) + float(d["wip_cost"])
            )


def test_benchmark_matches_direct_simulation(small_report, small_scenario_path):
    from fabsched import objective
    from fabsched.scenario import load_scenario

    scenario = load_scenario(small_scenario_path)
    final = sim.run(scenario, 101, make_dispatcher("cr"), 3 * MINUTES_PER_DAY,
                    initial_wip=15, trace_enabled=False)
    expected = objective.kpis(final)
    row = next(d for d in small_report.detail_rows
               if d["dispatcher"] == "cr" and int(d["seed"]) == 101)
    assert float(row["cost"]) == pytest.approx(expected.cost)


def test_write_report_and_csv_round_trip(tmp_path, small_report):
    paths = write_report(small_report, tmp_path)
    names = {p.name for p in paths}
    assert {"kpis.csv", "cost.csv", "details.csv", "table.txt", "summary.json"} <= names

    detail_rows = bench.read_details_csv(tmp_path / "details.csv")
    kpi_rows, cost_rows = bench.aggregate_details(detail_rows)
    by_key = {(r["dispatcher"], r["lot_type"]): r for r in kpi_rows}
    for row in small_report.kpi_rows:
        again = by_key[(row["dispatcher"], row["lot_type"])]
        for col in ("on_time_mean", "on_time_std", "cycle_mean", "cycle_std"):
            if row[col] is None:
                assert again[col] is None
            else:
                assert again[col] == pytest.approx(row[col], abs=1e-9)
        assert again["count"] == row["count"]
    by_disp = {r["dispatcher"]: r for r in cost_rows}
    for row in small_report.cost_rows:
        assert by_disp[row["dispatcher"]]["cost_mean"] == pytest.approx(row["cost_mean"])


def test_write_report_empty_emits_headers_only(tmp_path):
    write_report(AggregateReport(), tmp_path)
    with open(tmp_path / "kpis.csv") as fh:
        lines = fh.read().splitlines()
    assert lines == [",".join(bench.KPI_FIELDS)]
    with open(tmp_path / "cost.csv") as fh:
        lines = fh.read().splitlines()
    assert lines == [",".join(bench.COST_FIELDS)]


def test_unknown_dispatcher_fails_fast(small_scenario_path):
    cfg = BenchmarkConfig(scenario_path=str(small_scenario_path), dispatchers=("lifo",),
                          seed_count=1)
    with pytest.raises(ValueError, match="fifo"):
        run_benchmark(cfg)


# --- CLI ---------------------------------------------------------------------------


def test_cli_generate_validate_round_trip(tmp_path, capsys):
    out = tmp_path / "gen.json"
    assert cli.main(["generate", "--families", "3", "--groups-per-family", "2",
                     "--products", "2", "--route-length", "12", "--seed", "3",
                     "--out", str(out)]) == 0
    assert cli.main(["validate", "--scenario", str(out)]) == 0
    captured = capsys.readouterr()
    assert "valid" in captured.out


def test_cli_generate_rejects_short_route(tmp_path):
    out = tmp_path / "short.json"
    assert cli.main(["generate", "--route-length", "2", "--out", str(out)]) == 2


def test_cli_validate_corrupt_scenario_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    doc = {
        "schema_version": 1,
        "families": [{"family_id": 0, "name": "f"}],
        "tool_groups": [{"group_id": 0, "family_id": 0, "machine_count": 1,
                         "batch_min": 4, "batch_max": 2}],
        "products": [],
        "transport_delay_matrix": [[0]],
    }
    bad.write_text(json.dumps(doc))
    assert cli.main(["validate", "--scenario", str(bad)]) == 2
    captured = capsys.readouterr()
    assert "batch" in captured.err


def test_cli_validate_unparseable_exits_2(tmp_path, capsys):
    bad = tmp_path / "nojson.json"
    bad.write_text("{")
    assert cli.main(["validate", "--scenario", str(bad)]) == 2
    assert "JSON" in capsys.readouterr().err


def test_cli_simulate_trace_line_count(tmp_path, small_scenario_path, capsys):
    trace_path = tmp_path / "trace.jsonl"
    code = cli.main(["simulate", "--scenario", str(small_scenario_path),
                     "--dispatcher", "edd", "--seed", "4", "--horizon-days", "2",
                     "--initial-wip", "10", "--trace-out", str(trace_path), "--json"])
    assert code == 0
    from fabsched.scenario import load_scenario

    scenario = load_scenario(small_scenario_path)
    final = sim.run(scenario, 4, make_dispatcher("edd"), 2 * MINUTES_PER_DAY, initial_wip=10)
    with open(trace_path) as fh:
        assert sum(1 for _ in fh) == len(final.trace)
    payload = json.loads(capsys.readouterr().out)
    assert "cost" in payload and "types" in payload


def test_cli_simulate_unknown_dispatcher(small_scenario_path, capsys):
    assert cli.main(["simulate", "--scenario", str(small_scenario_path),
                     "--dispatcher", "lifo"]) == 2
    err = capsys.readouterr().err
    assert "fifo" in err and "agent:" in err


def test_cli_evaluate_and_report(tmp_path, small_scenario_path, capsys):
    out_dir = tmp_path / "rep"
    code = cli.main(["evaluate", "--scenario", str(small_scenario_path),
                     "--dispatchers", "fifo,cr", "--seeds", "2", "--base-seed", "7",
                     "--horizon-days", "2", "--initial-wip", "10",
                     "--out-dir", str(out_dir), "--json"])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert {r["dispatcher"] for r in payload["cost"]} == {"fifo", "cr"}
    assert (out_dir / "kpis.csv").exists()

    code = cli.main(["report", "--details", str(out_dir / "details.csv"), "--json"])
    assert code == 0
    re_payload = json.loads(capsys.readouterr().out)
    original = {r["dispatcher"]: r["cost_mean"] for r in payload["cost"]}
    recomputed = {r["dispatcher"]: r["cost_mean"] for r in re_payload["cost"]}
    for name, value in original.items():
        assert recomputed[name] == pytest.approx(value, abs=1e-9)


def test_cli_evaluate_unknown_dispatcher_usage_error(small_scenario_path, capsys):
    assert cli.main(["evaluate", "--scenario", str(small_scenario_path),
                     "--dispatchers", "fifo,bogus", "--seeds", "1",
                     "--out-dir", "/tmp/unused"]) == 2
    assert "fifo" in capsys.readouterr().err


def test_cli_fit_normalizer_and_train_ssl(tmp_path, small_scenario_path, capsys):
    norm_path = tmp_path / "norm.json"
    assert cli.main(["fit-normalizer", "--scenario", str(small_scenario_path),
                     "--dispatcher", "cr", "--horizon-days", "2", "--seed", "5",
                     "--initial-wip", "10", "--out", str(norm_path)]) == 0
    assert norm_path.exists()

    params_path = tmp_path / "ssl.npz"
    assert cli.main(["train-ssl", "--scenario", str(small_scenario_path),
                     "--dispatcher", "cr", "--horizon-days", "1", "--seed", "5",
                     "--initial-wip", "10", "--normalizer", str(norm_path),
                     "--epochs", "3", "--out", str(params_path)]) == 0
    assert params_path.exists()

    # the saved params embed the normalizer, so agent:<path> resolves
    d = make_dispatcher(f"agent:{params_path}")
    assert d.name == f"agent:{params_path}"


def test_cli_train_nes_smoke(tmp_path, small_scenario_path, capsys):
    params_path = tmp_path / "ssl.npz"
    assert cli.main(["train-ssl", "--scenario", str(small_scenario_path),
                     "--dispatcher", "cr", "--horizon-days", "1", "--seed", "5",
                     "--initial-wip", "10", "--epochs", "2", "--out", str(params_path)]) == 0
    out_path = tmp_path / "nes.npz"
    history = tmp_path / "history.csv"
    assert cli.main(["train-nes", "--scenario", str(small_scenario_path),
                     "--ssl-params", str(params_path), "--population", "2",
                     "--iterations", "2", "--sigma", "0.05", "--horizon-days", "1",
                     "--initial-wip", "10", "--seed", "6",
                     "--history-out", str(history), "--out", str(out_path)]) == 0
    assert out_path.exists()
    with open(history) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert {"iteration", "sigma", "lr", "fitness_mean", "fitness_max", "center_cost"} <= set(rows[0])
    # trained file is usable as an agent dispatcher in evaluate
    out_dir = tmp_path / "rep2"
    assert cli.main(["evaluate", "--scenario", str(small_scenario_path),
                     "--dispatchers", f"fifo,agent:{out_path}", "--seeds", "1",
                     "--horizon-days", "1", "--initial-wip", "10",
                     "--out-dir", str(out_dir)]) == 0
