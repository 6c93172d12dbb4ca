import json
from fractions import Fraction
from math import comb

import numpy as np
import pytest
from scipy import stats

from datamarket import run_scenario
from datamarket.errors import UnknownAttack
from datamarket.privacy import (ATTACKS, build_observer_view, chance_interval, clopper_pearson,
                                contract_events, get_attack, ground_truth, linkage_accuracy, make_report,
                                monte_carlo, run_linkage_experiment, attack_trace)


@pytest.fixture(scope="module")
def run8():
    return run_scenario(dict(seed=31, n_sellers=8, n_buyers=8, agent_delay_max=3))


def test_external_view_never_sees_brokers_chain(run8):
    view = build_observer_view(run8.trace)
    broker_addr = run8.brokers[0].address.encode()
    for blk in view.seller_chain_blocks + view.buyer_chain_blocks:
        assert all(not k.startswith(broker_addr) for k, _ in blk.mutations)
        assert set(blk.tags) <= {"ciphertext", "bookkeeping"}
    assert {a.chain for a in view.anchor_txs} == {"sellers", "buyers", "brokers"}
    assert all(len(a.state_commitment) == 32 for a in view.anchor_txs)
    assert view.insider_knowledge == []


def test_insider_views(run8):
    seller, buyer = run8.sellers[0], run8.buyers[0]
    sv = build_observer_view(run8.trace, "insider_seller", seller)
    assert sv.insider_contract == seller.contract.address
    assert {"ku_buyer", "id_b", "id_s"} <= set(sv.insider_knowledge[0])
    bv = build_observer_view(run8.trace, "insider_buyer", buyer)
    assert "address" in bv.insider_knowledge[0]
    with pytest.raises(ValueError):
        build_observer_view(run8.trace, "insider_seller", buyer)
    with pytest.raises(ValueError):
        build_observer_view(run8.trace, "insider_buyer")
    with pytest.raises(ValueError):
        build_observer_view(run8.trace, "validator")


def test_ground_truth_is_a_bijection(run8):
    truth = ground_truth(run8.trace)
    assert len(truth) == 8 and len(set(truth.values())) == 8
    assert linkage_accuracy(truth, truth) == 1.0
    assert linkage_accuracy({}, truth) == 0.0
    assert linkage_accuracy({}, {}) == 0.0


@pytest.mark.parametrize("name", sorted(ATTACKS))
def test_attacks_return_full_assignment(run8, name):
    guess = get_attack(name)(build_observer_view(run8.trace), rng=0)
    assert len(guess) == 8 and len(set(guess.values())) == 8


def test_unknown_attack():
    with pytest.raises(UnknownAttack):
        get_attack("telepathy")


def test_unmitigated_attacks_beat_chance():
    r = run_scenario(dict(seed=4, n_sellers=8, n_buyers=8, padding=False, batching=False,
                          agent_delay_max=5))
    view, truth = build_observer_view(r.trace), ground_truth(r.trace)
    assert linkage_accuracy(get_attack("timing")(view, rng=1), truth) > 3 / 8
    assert linkage_accuracy(get_attack("size")(view, rng=1), truth) > 3 / 8


@pytest.mark.parametrize("k,n", [(0, 10), (10, 10), (3, 40), (200, 3200)])
def test_clopper_pearson_matches_scipy(k, n):
    ref = stats.binomtest(k, n).proportion_ci(0.95, method="exact")
    lo, hi = clopper_pearson(k, n)
    assert lo == pytest.approx(ref.low, abs=1e-12) and hi == pytest.approx(ref.high, abs=1e-12)


def _binom_quantile(q, n, p):
    # smallest k with P(X <= k) >= q, by direct summation of the pmf
    p = Fraction(p)
    acc = Fraction(0)
    for k in range(n + 1):
        acc += comb(n, k) * p**k * (1 - p) ** (n - k)
        if acc >= q:
            return k


def test_chance_interval_brackets_one_over_n():
    lo, hi = chance_interval(16, 200)
    assert lo < 1 / 16 < hi
    assert lo * 3200 == _binom_quantile(Fraction(25, 1000), 3200, Fraction(1, 16)) == 174
    assert hi * 3200 == _binom_quantile(Fraction(975, 1000), 3200, Fraction(1, 16)) == 227


def test_single_run_report_is_degenerate(run8):
    rep = attack_trace(run8.trace, "size", seed=0)
    d = json.loads(rep.to_json())
    assert d["n_runs"] == 1 and "warning" in d
    assert set(d) == {"attack", "n_trades", "n_runs", "mean_accuracy", "ci95_low", "ci95_high",
                      "mitigations", "warning"}


def test_report_fields():
    rep = make_report("timing", 4, [0.25, 0.5], {"padding": True, "batching": True})
    assert rep.mean_accuracy == 0.375 and rep.warning is None
    assert rep.ci95_low < 0.375 < rep.ci95_high
    assert "warning" not in rep.to_dict()


def test_small_monte_carlo_is_reproducible():
    a = run_linkage_experiment(n_trades=4, n_runs=3)
    b = monte_carlo(dict(n_sellers=4, n_buyers=4, batch_threshold=4, agent_delay_max=5,
                         max_epochs=400), n_runs=3)
    assert {k: v.accuracies for k, v in a.items()} == {k: v.accuracies for k, v in b.items()}
    assert a["timing"].mitigations == {"padding": True, "batching": True}


@pytest.mark.parametrize("name", sorted(ATTACKS))
def test_single_trade_is_always_linked(name):
    r = run_scenario(dict(seed=12, n_sellers=1, n_buyers=1))
    view, truth = build_observer_view(r.trace), ground_truth(r.trace)
    assert linkage_accuracy(get_attack(name)(view, rng=0), truth) == 1.0


def test_random_permutation_expectation():
    # analytic: a uniform random matching of N pairs gets 1/N right on average
    rng = np.random.default_rng(0)
    n, runs = 16, 4000
    truth = {f"b{i}": f"s{i}" for i in range(n)}
    acc = [linkage_accuracy({f"b{i}": f"s{j}" for i, j in enumerate(rng.permutation(n))}, truth)
           for _ in range(runs)]
    # fixed points of a random permutation have variance 1, so sd(mean) = 1 / (n sqrt(runs))
    assert abs(np.mean(acc) - 1 / n) < 4 / (n * np.sqrt(runs))


def test_padding_collapses_opening_lengths():
    r = run_scenario(dict(seed=5, n_sellers=8, n_buyers=8))
    view = build_observer_view(r.trace)
    lengths = {e.length for e in contract_events(view.seller_chain_blocks + view.buyer_chain_blocks)
               if e.direction == "out" and e.entry in ("sell", "buy")}
    assert lengths <= {256, 1024, 4096}
    by_entry = {}
    for e in contract_events(view.seller_chain_blocks + view.buyer_chain_blocks):
        if e.direction == "out":
            by_entry.setdefault(e.entry, set()).add(e.length)
    assert all(len(v) == 1 for v in by_entry.values()), by_entry
