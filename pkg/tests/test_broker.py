import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from datamarket import crypto, protocol
from datamarket.broker import (BrokerConfig, BrokerContract, BuyOrder, Invoice, PriceTable,
                               ReputationTable, SellOrder, TradeState, compute_price,
                               is_compatible, match_orders)
from datamarket.ca import CertificateAuthority, EnrollmentRequest
from datamarket.errors import (CertExpired, DuplicateOrder, InvalidDD, InvalidInput,
                               ScoreOutOfRange, SensorTypeMismatch, StateError, WrongAmount,
                               DecryptFailure)
from datamarket.protocol import DataDescription, SensorType

T = SensorType.TEMPERATURE


def dd(t=T, region="hx-a", volume=100, window=(0, 10)):
    return DataDescription(t, region, volume, window)


class World:
    def __init__(self, seed=0, **cfg):
        self.rng = np.random.default_rng(seed)
        self.ca = CertificateAuthority(2, self.rng)
        self.broker = BrokerContract(crypto.keygen(self.rng), PriceTable(), self.ca.trusted_keys,
                                     BrokerConfig(batching=False, **cfg), self.rng)
        self.broker.address = "broker"

    def sell(self, d=None, cert_type=T, validity=100, id_s=None, now=0, origin="s-contract"):
        d = d or dd()
        kp = crypto.keygen(self.rng)
        cert = self.ca.issue_certificate(
            EnrollmentRequest(d.region, cert_type, (1.0,), crypto.new_nonce(self.rng)),
            now=0, validity=validity)
        id_s = id_s or crypto.new_nonce(self.rng)
        msg = protocol.encode("sell", dd=d.to_dict(), cert=cert.to_dict(), id_s=id_s.value,
                              ku_seller=kp.public)
        c = crypto.hybrid_encrypt(self.broker.public_key, msg, rng=self.rng)
        return c, kp, self.broker.handle_sell_request(c, origin, now)

    def buy(self, d=None, now=0, origin="b-contract"):
        d = d or dd()
        kp = crypto.keygen(self.rng)
        id_b = crypto.new_nonce(self.rng)
        msg = protocol.encode("buy", dd=d.to_dict(), id_b=id_b.value, ku_buyer=kp.public)
        c = crypto.hybrid_encrypt(self.broker.public_key, msg, rng=self.rng)
        return c, kp, id_b, self.broker.handle_buy_request(c, origin, now)

    def matched(self):
        _, skp, _ = self.sell()
        _, bkp, id_b, _ = self.buy()
        (trade,) = self.broker.match(0)
        return trade, skp, bkp, id_b

    def score_msg(self, trade, score):
        return crypto.hybrid_encrypt(self.broker.public_key,
                                     protocol.encode("score", trade_id=trade.trade_id,
                                                     score=score), rng=self.rng)


# -- pricing & compatibility --------------------------------------------------

@pytest.mark.parametrize("basic,volume,price", [(1, 1, 1), (3, 7, 21), (2, 500, 1000)])
def test_compute_price(basic, volume, price):
    assert compute_price(basic, volume) == price


def test_compute_price_rejects_zero_volume():
    with pytest.raises(InvalidInput):
        compute_price(5, 0)


def test_price_table_rejects_nonpositive():
    with pytest.raises(InvalidInput):
        PriceTable({"temperature": 0})


@pytest.mark.parametrize("sell,buy,ok", [
    (dd(), dd(), True),
    (dd(), dd(t=SensorType.HUMIDITY), False),
    (dd(region="x"), dd(region="y"), False),
    (dd(region="x"), dd(region="*"), True),
    (dd(volume=50), dd(volume=100), False),
    (dd(volume=150), dd(volume=100), True),
    (dd(window=(0, 5)), dd(window=(6, 9)), False),
    (dd(window=(0, 5)), dd(window=(5, 9)), True),
])
def test_compatibility(sell, buy, ok):
    assert is_compatible(sell, buy) is ok


# -- matching oracle --------------------------------------------------------------

def brute_force_match(sells, buys, means):
    """Reference: every buyer in admission order takes the best-ranked free compatible seller."""
    pairs, free = [], list(sells)
    for b in sorted(buys, key=lambda b: (b.admitted_epoch, b.order_id)):
        cands = [s for s in free if is_compatible(s.dd, b.dd)]
        if not cands:
            continue
        best = min(cands, key=lambda s: (-means.get(s.origin_contract, 0.0),
                                         s.admitted_epoch, s.order_id))
        free.remove(best)
        pairs.append((best.order_id, b.order_id))
    return pairs


order_dd = st.builds(DataDescription,
                     st.sampled_from([T, SensorType.HUMIDITY]),
                     st.sampled_from(["r1", "r2", "*"]),
                     st.integers(1, 4),
                     st.sampled_from([(0, 3), (2, 6), (5, 9)]))


@settings(max_examples=200, deadline=None)
@given(sell_dds=st.lists(order_dd, max_size=5), buy_dds=st.lists(order_dd, max_size=5),
       epochs=st.lists(st.integers(0, 2), min_size=10, max_size=10),
       scores=st.lists(st.integers(0, 100), min_size=5, max_size=5))
def test_matching_equals_brute_force(sell_dds, buy_dds, epochs, scores):
    sells = [SellOrder(d, None, None, b"", f"s{i}",
                       order_id=i, admitted_epoch=epochs[i])
             for i, d in enumerate(sell_dds) if d.region != "*"]
    buys = [BuyOrder(d, None, b"", f"b{j}", order_id=10 + j, admitted_epoch=epochs[5 + j])
            for j, d in enumerate(buy_dds)]
    rep = ReputationTable()
    means = {}
    for i, sc in enumerate(scores[:len(sells)]):
        if sc % 3:  # leave some sellers unrated
            rep.record(f"s{i}", sc)
            means[f"s{i}"] = float(sc)
    got = [(s.order_id, b.order_id) for s, b in match_orders(sells, buys, rep)]
    assert got == brute_force_match(sells, buys, means)
    assert len({s for s, _ in got}) == len(got)
    # maximality: no unmatched buyer has an unmatched compatible seller
    used_s = {s for s, _ in got}
    used_b = {b for _, b in got}
    for b, s in itertools.product(buys, sells):
        if b.order_id not in used_b and s.order_id not in used_s:
            assert not is_compatible(s.dd, b.dd)


def test_single_pair_and_type_mismatch():
    s = SellOrder(dd(), None, None, b"", "s", order_id=0)
    assert len(match_orders([s], [BuyOrder(dd(), None, b"", "b", order_id=1)])) == 1
    assert match_orders([s], [BuyOrder(dd(t=SensorType.HUMIDITY), None, b"", "b",
                                       order_id=1)]) == []


def test_reputation_breaks_ties():
    s0 = SellOrder(dd(), None, None, b"", "s0", order_id=0)
    s1 = SellOrder(dd(), None, None, b"", "s1", order_id=1)
    rep = ReputationTable()
    rep.record("s1", 90)
    ((s, _),) = match_orders([s0, s1], [BuyOrder(dd(), None, b"", "b", order_id=2)], rep)
    assert s is s1


# -- reputation -----------------------------------------------------------------

@given(st.lists(st.integers(0, 100), min_size=1, max_size=30))
def test_reputation_mean_oracle(scores):
    rep = ReputationTable()
    for sc in scores:
        rep.record("s", sc)
    assert rep.mean("s") == pytest.approx(sum(scores) / len(scores))
    assert rep.to_json() == [{"seller_contract_id": "s", "score_count": len(scores),
                              "mean": rep.mean("s")}]


def test_reputation_80_then_60():
    rep = ReputationTable()
    assert rep.record("s", 80).mean == 80
    assert rep.record("s", 60).mean == 70


# -- admission --------------------------------------------------------------------

def test_admission_and_cert_checks():
    w = World()
    w.sell()
    assert len(w.broker.sell_book) == 1
    with pytest.raises(CertExpired):
        w.sell(validity=5, now=5)
    with pytest.raises(SensorTypeMismatch):
        w.sell(d=dd(t=SensorType.HUMIDITY), cert_type=T)


def test_buy_volume_zero_and_replay():
    w = World()
    with pytest.raises(InvalidDD):
        w.buy(d=dd(volume=0))
    c, *_ = w.buy()
    with pytest.raises(DuplicateOrder):
        w.broker.handle_buy_request(c, "b-contract", 1)


def test_sell_replay_rejected():
    w = World()
    c, _, _ = w.sell()
    with pytest.raises(DuplicateOrder):
        w.broker.handle_sell_request(c, "elsewhere", 3)


# -- trade lifecycle ----------------------------------------------------------------

def test_invoice_then_payment_then_notice():
    w = World()
    trade, skp, bkp, id_b = w.matched()
    c = w.broker.issue_invoice(trade)
    assert trade.state is TradeState.INVOICED
    inv = Invoice.decode(crypto.hybrid_decrypt(bkp.secret, c))
    assert inv.price == trade.price == 2 * 100
    with pytest.raises(DecryptFailure):
        crypto.hybrid_decrypt(skp.secret, c)
    with pytest.raises(StateError):
        w.broker.issue_invoice(trade)
    w.broker.handle_payment(trade.trade_id, trade.price, payer="b-contract")
    assert trade.state is TradeState.SELLER_NOTIFIED and trade.escrow == trade.price
    notice_blob = w.broker._outbox[-1].payload
    notice = protocol.decode(crypto.hybrid_decrypt(skp.secret, notice_blob), "notice")
    assert set(notice) - {"k"} == {"ku_buyer", "id_b", "id_s"}
    assert protocol.unb64(notice["ku_buyer"]) == bkp.public
    assert protocol.unb64(notice["id_b"]) == id_b.value
    assert protocol.unb64(notice["id_s"]) == trade.sell_order.seller_nonce.value


def test_wrong_amount_refunds():
    w = World()
    trade, *_ = w.matched()
    w.broker.issue_invoice(trade)
    with pytest.raises(WrongAmount):
        w.broker.handle_payment(trade.trade_id, trade.price - 1, payer="b-contract")
    refund = w.broker._outbox[-1]
    assert (refund.entry, refund.amount, refund.target) == ("refund", trade.price - 1,
                                                            "b-contract")
    assert trade.state is TradeState.INVOICED


def test_payment_unknown_trade_and_early_notice():
    w = World()
    with pytest.raises(StateError):
        w.broker.handle_payment(b"\x00" * 16, 5)
    trade, *_ = w.matched()
    with pytest.raises(StateError):
        w.broker.notify_seller(trade)


def paid_trade(w):
    trade, skp, bkp, id_b = w.matched()
    w.broker.issue_invoice(trade)
    w.broker.handle_payment(trade.trade_id, trade.price)
    return trade


def test_relay_is_byte_identical_and_once():
    w = World()
    with pytest.raises(StateError):
        w.broker.relay_delivery(b"\x01" * 16, b"x")
    trade = paid_trade(w)
    body = bytes(range(256))
    assert w.broker.relay_delivery(trade.trade_id, body) == body
    assert w.broker._outbox[-1].payload == body
    with pytest.raises(StateError):
        w.broker.relay_delivery(trade.trade_id, body)


def test_score_and_settle():
    w = World()
    trade = paid_trade(w)
    w.broker.relay_delivery(trade.trade_id, b"d")
    with pytest.raises(ScoreOutOfRange):
        w.broker.handle_score(w.score_msg(trade, 101))
    w.broker.handle_score(w.score_msg(trade, 80))
    assert w.broker.reputation.mean(trade.sell_order.origin_contract) == 80
    assert trade.state is TradeState.SCORED
    w.broker.settle(trade.trade_id)
    assert trade.state is TradeState.SETTLED and trade.escrow == 0
    pay = w.broker._outbox[-1]
    assert (pay.entry, pay.amount) == ("settle", trade.price)
    with pytest.raises(StateError):
        w.broker.settle(trade.trade_id)


def test_score_after_early_settlement_still_counts():
    w = World()
    trade = paid_trade(w)
    w.broker.relay_delivery(trade.trade_id, b"d")
    w.broker.settle(trade.trade_id)
    w.broker.handle_score(w.score_msg(trade, 40))
    assert w.broker.reputation.mean(trade.sell_order.origin_contract) == 40
    with pytest.raises(StateError):
        w.broker.handle_score(w.score_msg(trade, 40))


def test_batching_threshold_and_timeout():
    w = World()
    w.broker.config.batching = True
    w.broker.config.batch_threshold = 3
    w.broker.config.batch_timeout = 4

    class FakeLedger:
        def __init__(self):
            self.sent = []

        def chain_of(self, addr):
            return "c"

        def submit_on_ledger(self, req, ref=None):
            self.sent.append(req.payload)

    led = FakeLedger()
    for i in range(2):
        w.broker._queue(0, "on_ledger", "x", bytes([i]), "e", None)
    assert w.broker.flush(led, 1) == 0
    assert w.broker.flush(led, 4) == 2  # oldest waited batch_timeout epochs
    for i in range(3):
        w.broker._queue(5, "on_ledger", "x", bytes([i]), "e", None)
    assert w.broker.flush(led, 5) == 3
    assert sorted(led.sent[2:]) == [b"\x00", b"\x01", b"\x02"]
