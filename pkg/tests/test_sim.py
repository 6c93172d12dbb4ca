import json

import pytest
from hypothesis import given, settings, strategies as st

from datamarket import ScenarioConfig, run_scenario
from datamarket.errors import ConfigParse
from datamarket.ledger import BOOKKEEPING
from datamarket.privacy import plaintext_leaks
from datamarket.sim import FAULTS


@pytest.mark.parametrize("bad", [
    {"n_sellers": -1}, {"max_epochs": 0}, {"prices": {"temperature": -1}},
    {"prices": {"plutonium": 3}}, {"faults": [{"agent": "seller0", "fault": "meteor"}]},
    {"no_such_key": 1}, {"seed": "x"},
])
def test_config_validation(bad):
    with pytest.raises(ConfigParse):
        ScenarioConfig.from_dict(bad)


def test_config_load_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigParse):
        ScenarioConfig.load(p)
    p.write_text("[1, 2]")
    with pytest.raises(ConfigParse):
        ScenarioConfig.load(p)


def test_config_round_trip():
    cfg = ScenarioConfig(seed=3, faults=[{"agent": "buyer0", "fault": "silent_buyer"}])
    assert ScenarioConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@settings(max_examples=12, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 5), padding=st.booleans(),
       batching=st.booleans(), gas=st.integers(0, 3))
def test_runs_are_clean(seed, n, padding, batching, gas):
    r = run_scenario(dict(seed=seed, n_sellers=n, n_buyers=n, padding=padding,
                          batching=batching, on_ledger_gas=gas, off_ledger_gas=gas % 2))
    assert r.ok, r.violations
    assert len(r.settled()) == n
    assert r.ledger.total_supply() == r.ledger.minted


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_deterministic_trace(seed):
    cfg = dict(seed=seed, n_sellers=3, n_buyers=3, agent_delay_max=3)
    assert run_scenario(cfg).trace.to_jsonl() == run_scenario(cfg).trace.to_jsonl()


def test_different_seeds_differ():
    a = run_scenario(dict(seed=1)).trace.to_jsonl()
    b = run_scenario(dict(seed=2)).trace.to_jsonl()
    assert a != b


def test_unmatched_buy_order_waits_in_book():
    r = run_scenario(dict(seed=5, n_sellers=1, n_buyers=2))
    assert r.ok and r.quiescent
    assert len(r.settled()) == 1
    assert len(r.brokers[0].buy_book) == 1
    assert r.buyers[1].state.value == "Requested"


@pytest.mark.parametrize("fault,agent,error", [
    ("replay_sell", "seller0", "DuplicateOrder"),
    ("stale_nonce", "seller0", "NonceMismatch"),
    ("wrong_key", "seller0", "DecryptFailure"),
    ("inflated_invoice", "buyer0", "PriceMismatch"),
    ("wrong_amount", "buyer0", "WrongAmount"),
])
def test_fault_reports_designated_error(fault, agent, error):
    r = run_scenario(dict(seed=21, n_sellers=2, n_buyers=2,
                          faults=[{"agent": agent, "fault": fault}]))
    assert r.ok, r.violations
    assert error in {e.detail["error"] for e in r.trace.rejections()}


def test_all_faults_covered():
    assert set(FAULTS) == {"silent_buyer", "wrong_key", "replay_sell", "stale_nonce",
                           "inflated_invoice", "wrong_amount"}


def test_blocks_are_opaque():
    r = run_scenario(dict(seed=3, n_sellers=4, n_buyers=4))
    for chain in ("sellers", "buyers"):
        for blk in r.ledger.blocks(chain):
            assert set(blk.tags) <= {"ciphertext", "bookkeeping"}
    assert plaintext_leaks(r) == []


def test_leak_scanner_positive_control():
    r = run_scenario(dict(seed=3, n_sellers=1, n_buyers=1))
    seller = r.sellers[0]
    r.ledger.write(seller.contract.address, b"oops", seller.sym_key_history[0].hex().encode(),
                   BOOKKEEPING)
    r.ledger.produce_block("sellers", r.epochs)
    leaks = plaintext_leaks(r)
    assert any("data key" in x and "sellers block" in x for x in leaks)


def test_region_leak_is_caught():
    r = run_scenario(dict(seed=3, n_sellers=1, n_buyers=1))
    r.trace.emit(0, "debug", detail={"region": r.buyers[0].dd.region})
    assert any("region" in x and "trace" in x for x in plaintext_leaks(r))


def test_broker_per_sensor_type_and_seller_choice():
    r = run_scenario(dict(seed=8, n_sellers=4, n_buyers=4, broker_per_sensor_type=True,
                          seller_choice=True))
    assert r.ok and len(r.settled()) == 4
