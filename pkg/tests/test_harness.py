import csv
import json

import pytest
from hypothesis import given, settings, strategies as st

from oacp.consistency import C, T
from oacp.datamodel import Op, get_model
from oacp.harness import (
    MetricsReport,
    WorkloadSpec,
    bank_story,
    check_trace,
    emit_report,
    generate_workload,
    percentile,
    report_from_trace,
    run_experiment,
    run_ops,
    write_csv,
)
from oacp.simnet import TraceParseError, read_trace


# -- workloads -------------------------------------------------------------


def test_cv_ratio_fixes_the_number_of_cvops():
    ops = generate_workload(WorkloadSpec(ops=10_000, cv_ratio=0.9))
    assert sum(op.kind == C for op in ops) == 9000
    assert len(ops) == 10_000


@pytest.mark.parametrize("scenario", ["shopping-cart", "counter", "twitter", "bank", "custom-mix", "bidding"])
def test_kinds_follow_the_scenario_model(scenario):
    model = get_model(scenario)
    for op in generate_workload(WorkloadSpec(scenario=scenario, ops=300, cv_ratio=0.5, seed=3)):
        assert model.kind_of(op.name) == op.kind


def test_kind_mapping_per_scenario():
    names = {}
    for scenario in ("shopping-cart", "counter", "twitter", "bank"):
        ops = generate_workload(WorkloadSpec(scenario=scenario, ops=400, cv_ratio=0.5, seed=1))
        names[scenario] = {k: {op.name for op in ops if op.kind == k} for k in (C, T)}
    assert names["shopping-cart"][C] == {"add", "remove"}
    assert names["shopping-cart"][T] == {"checkout"}
    assert names["counter"][C] == {"incr"}
    assert "reset" in names["counter"][T]
    assert names["twitter"][C] == {"add_follower"}
    assert names["twitter"][T] == {"tweet", "read"}
    assert names["bank"][C] == {"deposit", "accrueinterest"}
    assert names["bank"][T] == {"withdraw"}


def test_same_spec_same_stream_and_seeds_differ():
    a = generate_workload(WorkloadSpec(scenario="shopping-cart", ops=200, seed=5, clients=3))
    b = generate_workload(WorkloadSpec(scenario="shopping-cart", ops=200, seed=5, clients=3))
    c = generate_workload(WorkloadSpec(scenario="shopping-cart", ops=200, seed=6, clients=3))
    assert a == b
    assert a != c


def test_consecutive_tweets_stream():
    ops = generate_workload(WorkloadSpec(scenario="twitter", ops=100, cv_ratio=0.0, t_names=("tweet",)))
    assert [op.name for op in ops] == ["tweet"] * 100


def test_bank_story():
    story = bank_story()
    assert [(op.name, op.args) for op in story] == [
        ("deposit", (20,)), ("accrueinterest", ()), ("withdraw", (60,)), ("deposit", (10,)), ("withdraw", (70,)),
    ]


@pytest.mark.parametrize("bad", [dict(scenario="chess"), dict(protocol="paxos"), dict(cv_ratio=1.5),
                                 dict(clients=0), dict(batch_size=0)])
def test_invalid_spec_rejected(bad):
    with pytest.raises(ValueError):
        WorkloadSpec(**bad)


# -- runs and reports --------------------------------------------------------


def test_empty_workload_has_no_protocol_messages():
    for protocol in ("oacp", "o2acp", "baseline", "batching"):
        res = run_experiment(WorkloadSpec(ops=0, protocol=protocol))
        assert res.report.protocol_messages == 0
        assert res.report.completed == 0


def test_same_spec_gives_byte_identical_trace(tmp_path):
    spec = WorkloadSpec(scenario="shopping-cart", ops=80, cv_ratio=0.6, clients=3, seed=9, jitter=0.3)
    run_experiment(spec, trace_path=tmp_path / "a.jsonl")
    run_experiment(spec, trace_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_two_seeds_distinct_traces_same_schema(tmp_path):
    for seed in (1, 2):
        run_experiment(WorkloadSpec(ops=40, clients=2, seed=seed, jitter=0.3), trace_path=tmp_path / f"{seed}.jsonl")
    a, b = read_trace(tmp_path / "1.jsonl"), read_trace(tmp_path / "2.jsonl")
    assert a != b
    keys = lambda recs: {r["rec"]: frozenset(r) for r in recs}
    assert keys(a) == keys(b)


@pytest.mark.parametrize("protocol", ["oacp", "o2acp", "baseline", "batching"])
def test_report_recomputes_from_trace(tmp_path, protocol):
    spec = WorkloadSpec(scenario="twitter", ops=60, cv_ratio=0.5, clients=2, protocol=protocol, batch_size=7)
    res = run_experiment(spec, trace_path=tmp_path / "t.jsonl")
    again = report_from_trace(read_trace(tmp_path / "t.jsonl"), res.report.meta)
    assert again.summary() == res.report.summary()
    assert again.by_class == res.report.by_class
    assert again.by_kind == res.report.by_kind
    assert {k: sorted(v) for k, v in again.latencies.items()} == res.report.latencies


def test_percentile_nearest_rank():
    samples = list(range(100, 0, -1))
    assert percentile(samples, 90) == 90.0
    assert percentile(samples, 50) == 50.0
    assert percentile(samples, 100) == 100.0
    assert percentile([7], 90) == 7.0
    assert percentile([], 90) is None


@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=200))
def test_p90_is_the_smallest_sample_covering_ninety_percent(xs):
    p = percentile(xs, 90)
    assert sum(x <= p for x in xs) >= 0.9 * len(xs)
    assert sum(x < p for x in xs) < 0.9 * len(xs)


def test_csv_round_trip(tmp_path):
    reports = [run_experiment(WorkloadSpec(ops=30, cv_ratio=r, seed=2)).report for r in (0.2, 0.8)]
    path = tmp_path / "r.csv"
    write_csv(reports, path)
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2
    for row, rep in zip(rows, reports):
        assert float(row["cv_ratio"]) == rep.meta["cv_ratio"]
        assert int(row["protocol_messages"]) == rep.protocol_messages
        assert int(row["completed"]) == rep.completed
        assert float(row["throughput"]) == pytest.approx(rep.throughput, rel=1e-6)
        assert float(row["T_p90_us"]) == rep.summary()["T_p90_us"]


def test_json_detail_keeps_latency_samples(tmp_path):
    rep = run_experiment(WorkloadSpec(ops=30, seed=4)).report
    emit_report(rep, tmp_path / "r.json", "json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["latencies"] == {k: v for k, v in rep.latencies.items()}
    assert d["summary"]["protocol_messages"] == rep.protocol_messages
    with pytest.raises(ValueError):
        emit_report(rep, tmp_path / "r.x", "xml")


def test_unwritable_path_raises(tmp_path):
    rep = MetricsReport(0, {}, {}, {C: [], T: []}, 0, 0, 0)
    with pytest.raises(OSError):
        emit_report(rep, tmp_path / "missing" / "dir" / "r.csv")


def test_throughput_is_ops_per_simulated_second():
    rep = MetricsReport(0, {}, {}, {}, completed=50, failed=0, duration_us=2_000_000)
    assert rep.throughput == 25.0


# -- check_trace -------------------------------------------------------------


def test_harness_trace_passes(tmp_path):
    run_experiment(WorkloadSpec(scenario="bank", ops=60, clients=3, cv_ratio=0.7), trace_path=tmp_path / "t.jsonl")
    assert check_trace(tmp_path / "t.jsonl")


def test_gsp_stale_read_trace_fails(tmp_path, gsp_records):
    path = tmp_path / "gsp.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in gsp_records))
    res = check_trace(path)
    assert not res
    assert any(set(v.witness) == {"wrB1", "rdB"} for v in res.violations)


def test_empty_trace_passes(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert check_trace(path)


def test_malformed_trace_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"rec": "mark", "t": 0}\n{not json\n')
    with pytest.raises(TraceParseError) as e:
        check_trace(path)
    assert e.value.line == 2


# -- cross-protocol properties -----------------------------------------------


@pytest.mark.parametrize("scenario", ["counter", "shopping-cart", "twitter", "custom-mix"])
def test_commutative_workloads_reach_the_same_value(scenario):
    # one client so every protocol sees the same program; reads only, so the
    # final value is the join of all CvOps
    model = get_model(scenario)
    t_names = {"counter": ("read",), "shopping-cart": ("read",), "twitter": ("read",), "custom-mix": ("read",)}[scenario]
    values = {}
    for protocol in ("oacp", "o2acp", "baseline", "batching"):
        spec = WorkloadSpec(scenario=scenario, ops=80, cv_ratio=0.7, clients=1, seed=11, protocol=protocol,
                            t_names=t_names, batch_size=16)
        res = run_experiment(spec)
        finals = res.final_values()
        assert len({json.dumps(v, sort_keys=True) for v in finals.values()}) == 1, (protocol, finals)
        values[protocol] = next(iter(finals.values()))
    assert len({json.dumps(v, sort_keys=True) for v in values.values()}) == 1, values


def test_oacp_messages_fall_as_cv_ratio_grows():
    counts = [
        run_experiment(WorkloadSpec(scenario="counter", ops=200, cv_ratio=r / 10, seed=0)).report.protocol_messages
        for r in range(11)
    ]
    assert all(a >= b for a, b in zip(counts, counts[1:])), counts


@pytest.mark.parametrize("protocol", ["baseline", "batching"])
def test_comparison_protocol_histories_pass_the_checker(protocol):
    res = run_experiment(WorkloadSpec(scenario="shopping-cart", ops=60, clients=3, protocol=protocol, batch_size=9,
                                      jitter=0.3))
    assert res.check(), res.check().text()
    assert res.report.completed == 60


def test_batch_of_one_costs_what_the_baseline_costs():
    spec = dict(scenario="counter", ops=50, cv_ratio=0.5, clients=1, seed=2)
    base = run_experiment(WorkloadSpec(protocol="baseline", **spec)).report
    one = run_experiment(WorkloadSpec(protocol="batching", batch_size=1, **spec)).report
    assert one.protocol_messages == base.protocol_messages


def test_batching_cost_is_per_batch():
    rep = run_experiment(WorkloadSpec(protocol="batching", ops=100, batch_size=10)).report
    assert rep.protocol_messages == 10 * 4


def test_run_ops_accepts_explicit_operations():
    # the story played by one sequential teller, so the outcome is fixed
    ops = [Op("teller", i, op.name, op.args, op.kind) for i, op in enumerate(bank_story())]
    res = run_ops(WorkloadSpec(scenario="bank", clients=1), ops)
    values = [v for _, _, v in res.clients["teller"].done]
    assert values[2] == {"ok": False, "balance": 21}
    assert values[4] == {"ok": False, "balance": 31}
    assert res.check()
