import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from flowsplit.scenarios import ConfigError, ScenarioConfig, apply_variant, get_scenario, run_scenario
from flowsplit.scenarios.builtin import BUILTIN, VARIANTS, builtin_scenarios
from flowsplit.scenarios.compare import bytes_between, default_windows, mean_goodput
from flowsplit.scenarios.runner import build_network
from flowsplit.sim.engine import millis
from flowsplit.sim.network import Datagram


def test_every_builtin_validates_and_round_trips():
    for name, cfg in builtin_scenarios().items():
        again = ScenarioConfig.from_json(cfg.to_json())
        assert again == cfg, name
        for v in VARIANTS:
            apply_variant(cfg, v)


def test_unknown_scenario_and_variant():
    with pytest.raises(KeyError):
        get_scenario("nope")
    with pytest.raises(ValueError):
        apply_variant(get_scenario("dsl-upload"), "split-ish")


def test_dsl_facts():
    cfg = get_scenario("dsl-upload")
    cross = sorted(f.start_s for f in cfg.flows if f.role == "cross")
    assert cross == [250.0, 500.0, 750.0]
    assert cfg.node("client").controller == "vegas"
    mb = cfg.middlebox("gw")
    assert mb.sides["client"].controller == "vegas"
    assert mb.sides["r1"].controller == "newreno"
    # with all three cross flows active the DSL line stays the observed bottleneck
    (core,) = [l for l in cfg.links if {l.a, l.b} == {"r1", "r2"}]
    (dsl_link,) = [l for l in cfg.links if {l.a, l.b} == {"client", "gw"}]
    assert core.bandwidth_bps / 4 > max(dsl_link.bandwidth_bps, dsl_link.bandwidth_ba_bps)
    down = get_scenario("dsl-download")
    assert {(f.src, f.dst) for f in down.flows if f.role == "observed"} == {("server", "client")}


def test_wireless_loss_schedule():
    cfg = get_scenario("wireless-eln")
    (wl,) = [l for l in cfg.links if l.eln]
    assert wl.loss == [[0.0, 0.0], [250.0, 0.001], [500.0, 0.01], [750.0, 0.03]]
    assert default_windows(cfg) == [(0.0, 250.0), (250.0, 500.0), (500.0, 750.0), (750.0, 1000.0)]


def test_intersite_steps_every_ten_seconds_at_a_fixed_rate():
    cfg = get_scenario("intersite")
    (wan,) = [l for l in cfg.links if l.loss]
    assert [t for t, _ in wan.loss] == [0.0, 10.0, 20.0, 30.0, 40.0, 50.0]
    for m in cfg.middleboxes:
        fixed = [s for s in m.sides.values() if s.controller == "fixedrate"]
        assert len(fixed) == 1 and fixed[0].fixed_rate > 0


def test_migration_readdresses_the_sender_at_ten_seconds():
    cfg = get_scenario("migration")
    (ev,) = cfg.events
    assert (ev.t_s, ev.kind, ev.node) == (10.0, "readdress", "a")
    assert all(l.bandwidth_bps == 10_000_000 for l in cfg.links if "registry" not in (l.a, l.b))


def test_end_to_end_variant_removes_middleboxes():
    cfg = apply_variant(get_scenario("dsl-upload"), "e2e-vegas")
    assert cfg.middleboxes == []
    assert all(n.kind != "middlebox" for n in cfg.nodes)
    assert cfg.node("client").controller == cfg.node("server").controller == "vegas"
    assert cfg.node("xl").controller == "newreno"


def _bad(mutate):
    d = get_scenario("queue-sharing").to_dict()
    mutate(d)
    with pytest.raises(ConfigError) as ei:
        ScenarioConfig.from_dict(d)
    return ei.value.path


def test_validation_names_the_offending_field():
    assert _bad(lambda d: d["links"][0].update(queue=0)) == "links[0].queue"
    assert _bad(lambda d: d["links"][0].update(b="ghost")) == "links[0].b"
    assert _bad(lambda d: d["nodes"][0].update(controller="cubic")) == "nodes[0].controller"
    assert _bad(lambda d: d["flows"][0].update(src="mb")) == "flows[0].src"
    assert _bad(lambda d: d.update(duration_s=0)) == "duration_s"
    assert _bad(lambda d: d["links"][0].update(loss=[[0, 0.1], [0, 0.2]])) == "links[0].loss[1]"
    assert _bad(lambda d: d.update(colour="red")) == "colour"
    with pytest.raises(ConfigError):
        ScenarioConfig.from_json("{not json")


def rtt_ms(cfg, a, b):
    net = build_network(cfg, 1)
    na, nb = net.nodes[a], net.nodes[b]
    out = []
    nb.deliver_local = lambda d: nb.send(Datagram(nb.addr, d.src, d.data))
    na.deliver_local = lambda d: out.append(net.sim.now)
    na.send(Datagram(na.addr, nb.addr, bytes(40)))
    net.sim.run_until(millis(1000))
    return out[0] / 1e6


def test_dsl_idle_round_trip_times():
    cfg = apply_variant(get_scenario("dsl-upload"), "e2e-newreno")
    assert rtt_ms(cfg, "client", "gw") == pytest.approx(20, rel=0.1)
    assert rtt_ms(cfg, "client", "server") == pytest.approx(120, rel=0.1)


@pytest.fixture(scope="module")
def short_run():
    return run_scenario(get_scenario("queue-sharing"), seed=3, duration_s=10)


def test_samples_land_on_the_interval_grid(short_run):
    s = short_run.samples["observed"]
    assert [x.t_ns for x in s] == [k * 1_000_000_000 for k in range(1, 11)]
    cums = [x.cum_bytes for x in s]
    assert cums == sorted(cums) and cums[-1] > 0


def test_bytes_between_matches_integrated_goodput(short_run):
    s = short_run.samples["observed"]
    integrated = sum(x.goodput_bps for x in s if 2 < x.t_s <= 8) * 1.0 / 8
    assert bytes_between(s, 2, 8) == pytest.approx(integrated)
    assert mean_goodput(s, 2, 8) * 6 / 8 == pytest.approx(integrated)


def test_csv_header_and_rows(short_run):
    lines = short_run.to_csv().splitlines()
    assert lines[0] == "t_s,flow_id,goodput_bps,e2e_delay_ms,cum_bytes"
    assert len(lines) == 11


@settings(max_examples=3, deadline=None)
@given(st.integers(0, 2**31))
def test_runs_are_deterministic_per_seed(seed):
    cfg = get_scenario("queue-sharing")
    a = run_scenario(cfg, seed=seed, duration_s=3).to_csv()
    b = run_scenario(cfg, seed=seed, duration_s=3).to_csv()
    assert a == b


def test_builtin_table_lists_every_scenario():
    assert set(BUILTIN) >= {"dsl-upload", "dsl-download", "wireless-eln", "intersite",
                            "migration", "middlebox-crash", "queue-sharing"}
    for cfg in builtin_scenarios().values():
        assert cfg.description and cfg.duration_s > 0
        json.loads(cfg.to_json())
        assert not math.isnan(cfg.measurement_interval_s)
