"""
Broker contract running on the consortium chain.

The broker is the only party that can read sell and buy requests.  It admits
orders, matches them, prices and invoices trades, holds the buyer's payment in
escrow, relays the seller's encrypted delivery to the buyer, keeps a
reputation table of sellers and finally pays the seller.

Every message the broker sends goes through an outbound queue.  With batching
enabled the queue behaves as a threshold mix: it is released, in shuffled
order, once it holds ``batch_threshold`` items or its oldest item has waited
``batch_timeout`` epochs.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import crypto, protocol
from .ca import Certificate, signature_valid
from .crypto import Ciphertext, KeyPair, Nonce
from .errors import (
    CertExpired,
    CertInvalid,
    DecryptFailure,
    DuplicateOrder,
    InvalidDD,
    InvalidInput,
    MarketError,
    ScoreOutOfRange,
    SensorTypeMismatch,
    StateError,
    WrongAmount,
)
from .ledger import BOOKKEEPING, SEALED, Delivery, Ledger, OnLedgerRequest
from .protocol import WILDCARD_REGION, DataDescription, SensorType, b64, unb64

log = logging.getLogger(__name__)

SCORE_RANGE = (0, 100)


class TradeState(str, enum.Enum):
    MATCHED = "Matched"
    INVOICED = "Invoiced"
    PAID = "Paid"
    SELLER_NOTIFIED = "SellerNotified"
    DELIVERED = "Delivered"
    SCORED = "Scored"
    SETTLED = "Settled"
    EXPIRED = "Expired"


FINAL_STATES = (TradeState.SETTLED, TradeState.EXPIRED)


@dataclass
class SellOrder:
    dd: DataDescription
    cert: Certificate
    seller_nonce: Nonce
    seller_pubkey: bytes
    origin_contract: str
    order_id: int = 0
    admitted_epoch: int = 0
    ref: Optional[str] = None


@dataclass
class BuyOrder:
    dd: DataDescription
    buyer_nonce: Nonce
    buyer_pubkey: bytes
    origin_contract: str
    order_id: int = 0
    admitted_epoch: int = 0
    ref: Optional[str] = None


@dataclass(frozen=True)
class Invoice:
    trade_id: bytes
    price: int
    pay_to: str

    def encode(self) -> bytes:
        return protocol.encode("invoice", trade_id=self.trade_id, price=self.price,
                               pay_to=self.pay_to)

    @classmethod
    def decode(cls, data: bytes) -> "Invoice":
        d = protocol.decode(data, "invoice")
        return cls(unb64(d["trade_id"]), int(d["price"]), d["pay_to"])


@dataclass
class Trade:
    trade_id: bytes
    sell_order: SellOrder
    buy_order: BuyOrder
    price: int
    state: TradeState = TradeState.MATCHED
    state_epoch: int = 0
    delivery_epoch: Optional[int] = None
    scored: bool = False
    seller_confirmed: bool = False
    escrow: int = 0

    @property
    def key(self) -> str:
        return self.trade_id.hex()


@dataclass
class ReputationEntry:
    seller_contract_id: str
    score_sum: int = 0
    score_count: int = 0

    @property
    def mean(self) -> Optional[float]:
        return self.score_sum / self.score_count if self.score_count else None


class ReputationTable:
    """One row per seller contract: running sum and count of scores."""

    def __init__(self):
        self.rows: dict[str, ReputationEntry] = {}

    def record(self, seller_contract_id: str, score: int) -> ReputationEntry:
        row = self.rows.setdefault(seller_contract_id, ReputationEntry(seller_contract_id))
        row.score_sum += score
        row.score_count += 1
        return row

    def mean(self, seller_contract_id: str, default: float = 0.0) -> float:
        row = self.rows.get(seller_contract_id)
        return row.mean if row is not None and row.score_count else default

    def to_json(self) -> list[dict]:
        return [
            {"seller_contract_id": r.seller_contract_id, "score_count": r.score_count,
             "mean": r.mean}
            for r in sorted(self.rows.values(), key=lambda r: r.seller_contract_id)
        ]


class PriceTable(dict):
    """sensor type -> basic price per data unit; published to everyone."""

    def __init__(self, prices: Mapping = protocol.DEFAULT_PRICES):
        super().__init__()
        for k, v in prices.items():
            if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
                raise InvalidInput(f"price for {k} must be a positive integer, got {v!r}")
            self[SensorType(k)] = v

    def price_for(self, dd: DataDescription) -> int:
        return compute_price(self[dd.sensor_type], dd.volume)


def compute_price(basic_price: int, volume: int) -> int:
    if basic_price <= 0 or volume <= 0:
        raise InvalidInput(f"basic_price and volume must be positive ({basic_price}, {volume})")
    return int(basic_price) * int(volume)


def windows_overlap(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


def is_compatible(sell: DataDescription, buy: DataDescription) -> bool:
    return (
        sell.sensor_type == buy.sensor_type
        and (buy.region == WILDCARD_REGION or sell.region == buy.region)
        and sell.volume >= buy.volume
        and windows_overlap(sell.time_window, buy.time_window)
    )


def match_orders(
    sells: Sequence[SellOrder],
    buys: Sequence[BuyOrder],
    reputation: Optional[ReputationTable] = None,
) -> list[tuple[SellOrder, BuyOrder]]:
    """Greedy deterministic matching.

    Buyers are served in admission order.  Each takes the first compatible
    free seller ranked by (reputation mean desc, admission epoch asc, order id).
    """
    rep = reputation or ReputationTable()
    ranked_sells = sorted(
        sells, key=lambda s: (-rep.mean(s.origin_contract), s.admitted_epoch, s.order_id)
    )
    ranked_buys = sorted(buys, key=lambda b: (b.admitted_epoch, b.order_id))
    taken: set[int] = set()
    pairs = []
    for b in ranked_buys:
        for s in ranked_sells:
            if s.order_id not in taken and is_compatible(s.dd, b.dd):
                taken.add(s.order_id)
                pairs.append((s, b))
                break
    return pairs


@dataclass
class BrokerConfig:
    buckets: Optional[Sequence[int]] = crypto.DEFAULT_BUCKETS
    batching: bool = True
    batch_threshold: int = 16
    batch_timeout: int = 8
    score_timeout: int = 5
    payment_timeout: int = 30
    delivery_timeout: int = 30
    seller_choice: bool = False


@dataclass
class _Outbound:
    queued: int
    kind: str  # "on_ledger" | "transfer"
    target: str
    payload: bytes
    entry: str
    ref: Optional[str]
    amount: int = 0
    on_sent: Optional[Callable[[int], None]] = None


class BrokerContract:
    def __init__(
        self,
        keys: KeyPair,
        prices: PriceTable,
        trusted_ca_keys: Sequence[bytes],
        config: Optional[BrokerConfig] = None,
        rng: crypto.RngLike = None,
        sensor_types: Optional[Iterable[SensorType]] = None,
    ):
        self._keys = keys  # enclave key; never exposed
        self.public_key = keys.public
        self.prices = prices
        self.trusted_ca_keys = list(trusted_ca_keys)
        self.config = config or BrokerConfig()
        self.rng = crypto.as_rng(rng) or np.random.default_rng()
        self.sensor_types = set(SensorType(t) for t in sensor_types) if sensor_types else None
        self.address = ""
        self.chain = ""
        self._state_key = crypto.new_symmetric_key(self.rng)
        self.sell_book: dict[int, SellOrder] = {}
        self.buy_book: dict[int, BuyOrder] = {}
        self.trades: dict[bytes, Trade] = {}
        self.reputation = ReputationTable()
        self._seen_nonces: set[bytes] = set()
        self._by_seller_nonce: dict[bytes, bytes] = {}
        self._next_order = 0
        self._outbox: list[_Outbound] = []
        self._ledger: Optional[Ledger] = None
        # fault-injection hooks keyed by ground-truth session ref
        self.inflate_invoice_refs: set[str] = set()
        self.stale_nonce_for: dict[str, Callable[[], Nonce]] = {}

    # ------------------------------------------------------------------ utils
    def _emit(self, now: int, event_type: str, **kw) -> None:
        if self._ledger is not None:
            self._ledger.trace.emit(now, event_type, chain=self.chain, **kw)

    def _seal(self, key: str, obj: dict) -> None:
        if self._ledger is None:
            return
        blob = crypto.sym_encrypt(self._state_key, json.dumps(obj, sort_keys=True).encode(),
                                  self.rng)
        self._ledger.write(self.address, f"{self.address}/{key}".encode(), blob, SEALED)

    def _set_state(self, trade: Trade, state: TradeState, now: int) -> None:
        trade.state = state
        trade.state_epoch = now
        self._emit(now, "trade_state", ref=trade.key, detail={"state": state.value})
        self._seal(f"trade/{trade.key}", {"state": state.value, "price": trade.price,
                                          "scored": trade.scored})

    def _encrypt(self, pk: bytes, message: bytes) -> Ciphertext:
        return crypto.hybrid_encrypt(pk, message, self.config.buckets, self.rng)

    def _decrypt(self, c) -> bytes:
        return crypto.hybrid_decrypt(self._keys.secret, c)

    def _queue(self, now: int, kind: str, target: str, payload: bytes, entry: str,
               ref: Optional[str], amount: int = 0,
               on_sent: Optional[Callable[[int], None]] = None) -> None:
        self._outbox.append(_Outbound(now, kind, target, payload, entry, ref, amount, on_sent))

    def _trade(self, trade_id: bytes) -> Trade:
        try:
            return self.trades[trade_id]
        except KeyError:
            raise StateError(f"unknown trade {trade_id.hex()}") from None

    def _check_type(self, dd: DataDescription) -> None:
        if self.sensor_types is not None and dd.sensor_type not in self.sensor_types:
            raise InvalidDD(f"this broker does not handle {dd.sensor_type.value}")

    # ------------------------------------------------------------ admission
    def handle_sell_request(self, c, origin: str, now: int, ref: Optional[str] = None) -> int:
        d = protocol.decode(self._decrypt(c), "sell")
        try:
            dd = DataDescription.from_dict(d["dd"])
            cert = Certificate.from_dict(d["cert"])
            id_s = Nonce(unb64(d["id_s"]))
            ku = unb64(d["ku_seller"])
        except (KeyError, ValueError, TypeError) as exc:
            raise DecryptFailure("malformed sell request") from exc
        dd.validate()
        self._check_type(dd)
        if not signature_valid(cert, self.trusted_ca_keys):
            raise CertInvalid("certificate signature does not verify")
        if now >= cert.expires_at:
            raise CertExpired(f"certificate expired at {cert.expires_at}, now {now}")
        if cert.sensor_type != dd.sensor_type:
            raise SensorTypeMismatch(f"cert {cert.sensor_type.value} vs dd {dd.sensor_type.value}")
        if id_s.value in self._seen_nonces:
            raise DuplicateOrder("seller nonce already used")
        self._seen_nonces.add(id_s.value)
        oid = self._next_order
        self._next_order += 1
        self.sell_book[oid] = SellOrder(dd, cert, id_s, ku, origin, oid, now, ref)
        self._emit(now, "admit", ref=ref, detail={"side": "sell", "order": oid})
        return oid

    def handle_buy_request(self, c, origin: str, now: int = 0, ref: Optional[str] = None) -> int:
        d = protocol.decode(self._decrypt(c), "buy")
        try:
            dd = DataDescription.from_dict(d["dd"])
            id_b = Nonce(unb64(d["id_b"]))
            ku = unb64(d["ku_buyer"])
        except (KeyError, ValueError, TypeError) as exc:
            raise DecryptFailure("malformed buy request") from exc
        dd.validate()
        self._check_type(dd)
        if id_b.value in self._seen_nonces:
            raise DuplicateOrder("buyer nonce already used")
        self._seen_nonces.add(id_b.value)
        oid = self._next_order
        self._next_order += 1
        self.buy_book[oid] = BuyOrder(dd, id_b, ku, origin, oid, now, ref)
        self._emit(now, "admit", ref=ref, detail={"side": "buy", "order": oid})
        return oid

    # -------------------------------------------------------------- matching
    def match(self, now: int) -> list[Trade]:
        pairs = match_orders(list(self.sell_book.values()), list(self.buy_book.values()),
                             self.reputation)
        trades = []
        for s, b in pairs:
            del self.sell_book[s.order_id]
            del self.buy_book[b.order_id]
            trade = Trade(crypto.random_bytes(self.rng, 16), s, b,
                          self.prices.price_for(b.dd), state_epoch=now)
            self.trades[trade.trade_id] = trade
            self._by_seller_nonce[s.seller_nonce.value] = trade.trade_id
            self._emit(now, "match", ref=trade.key, detail={
                "sell_ref": s.ref, "buy_ref": b.ref, "seller_contract": s.origin_contract,
                "buyer_contract": b.origin_contract, "price": trade.price})
            self._set_state(trade, TradeState.MATCHED, now)
            trades.append(trade)
        return trades

    def offer_to_seller(self, trade: Trade, now: int = 0) -> Ciphertext:
        """Optional seller-choice round: show the seller the buyer's request."""
        if trade.state is not TradeState.MATCHED or trade.seller_confirmed:
            raise StateError(f"cannot offer trade in state {trade.state.value}")
        msg = protocol.encode("offer", trade_id=trade.trade_id,
                              id_s=trade.sell_order.seller_nonce.value, price=trade.price,
                              dd=trade.buy_order.dd.to_dict())
        c = self._encrypt(trade.sell_order.seller_pubkey, msg)
        self._queue(now, "on_ledger", trade.sell_order.origin_contract, c.blob, "offer", trade.key)
        return c

    def handle_confirm(self, c, now: int = 0) -> Trade:
        d = protocol.decode(self._decrypt(c), "confirm")
        trade = self._trade(unb64(d["trade_id"]))
        if trade.state is not TradeState.MATCHED or trade.seller_confirmed:
            raise StateError("confirmation for a trade not awaiting one")
        if unb64(d["id_s"]) != trade.sell_order.seller_nonce.value:
            raise StateError("confirmation nonce mismatch")
        if not d.get("accept", False):
            self._set_state(trade, TradeState.EXPIRED, now)
            return trade
        trade.seller_confirmed = True
        self.issue_invoice(trade, now)
        return trade

    # --------------------------------------------------------------- invoice
    def issue_invoice(self, trade: Trade, now: int = 0) -> Ciphertext:
        if trade.state is not TradeState.MATCHED:
            raise StateError(f"cannot invoice trade in state {trade.state.value}")
        price = trade.price
        if trade.buy_order.ref in self.inflate_invoice_refs:
            price += 1
        inv = Invoice(trade.trade_id, price, self.address)
        c = self._encrypt(trade.buy_order.buyer_pubkey, inv.encode())
        self._queue(now, "on_ledger", trade.buy_order.origin_contract, c.blob, "invoice",
                    trade.key)
        self._set_state(trade, TradeState.INVOICED, now)
        return c

    def handle_payment(self, trade_id: bytes, amount: int, now: int = 0,
                       payer: Optional[str] = None) -> Trade:
        """Escrow an exact payment; anything else is refunded to ``payer``."""
        try:
            trade = self._trade(trade_id)
            if trade.state is not TradeState.INVOICED:
                raise StateError(f"payment for trade in state {trade.state.value}")
            if amount != trade.price:
                raise WrongAmount(f"paid {amount}, invoice {trade.price}")
        except (StateError, WrongAmount):
            if payer is not None and amount > 0:
                self._queue(now, "transfer", payer, b"", "refund", trade_id.hex(), amount)
            raise
        trade.escrow = amount
        self._set_state(trade, TradeState.PAID, now)
        self.notify_seller(trade, now)
        return trade

    def notify_seller(self, trade: Trade, now: int = 0) -> Ciphertext:
        if trade.state is not TradeState.PAID:
            raise StateError(f"cannot notify seller in state {trade.state.value}")
        id_s = trade.sell_order.seller_nonce
        stale = self.stale_nonce_for.get(trade.sell_order.ref or "")
        if stale is not None:
            id_s = stale()
        msg = protocol.encode("notice", ku_buyer=trade.buy_order.buyer_pubkey,
                              id_b=trade.buy_order.buyer_nonce.value, id_s=id_s.value)
        c = self._encrypt(trade.sell_order.seller_pubkey, msg)
        self._queue(now, "on_ledger", trade.sell_order.origin_contract, c.blob, "notice",
                    trade.key)
        self._set_state(trade, TradeState.SELLER_NOTIFIED, now)
        return c

    # -------------------------------------------------------------- delivery
    def trade_for_routing_tag(self, tag) -> Trade:
        d = protocol.decode(self._decrypt(tag), "route")
        tid = self._by_seller_nonce.get(unb64(d["id_s"]))
        if tid is None:
            raise StateError("delivery for unknown seller nonce")
        return self.trades[tid]

    def relay_delivery(self, trade_id: bytes, c, now: int = 0) -> bytes:
        """Forward the seller's delivery ciphertext to the buyer's contract, unmodified."""
        trade = self._trade(trade_id)
        if trade.state is not TradeState.SELLER_NOTIFIED:
            raise StateError(f"cannot relay delivery in state {trade.state.value}")
        blob = c.blob if isinstance(c, Ciphertext) else bytes(c)

        def sent(epoch: int, trade=trade) -> None:
            trade.delivery_epoch = epoch

        self._queue(now, "on_ledger", trade.buy_order.origin_contract, blob, "delivery",
                    trade.key, on_sent=sent)
        self._set_state(trade, TradeState.DELIVERED, now)
        return blob

    # ----------------------------------------------------------- reputation
    def handle_score(self, c, now: int = 0) -> Trade:
        d = protocol.decode(self._decrypt(c), "score")
        trade = self._trade(unb64(d["trade_id"]))
        score = d["score"]
        if trade.state not in (TradeState.DELIVERED, TradeState.SETTLED) or trade.scored:
            raise StateError(f"score for trade in state {trade.state.value}")
        if not isinstance(score, int) or not SCORE_RANGE[0] <= score <= SCORE_RANGE[1]:
            raise ScoreOutOfRange(f"score {score!r} outside {SCORE_RANGE}")
        seller = trade.sell_order.origin_contract
        row = self.reputation.record(seller, score)
        if self._ledger is not None:
            self._ledger.write(self.address, f"{self.address}/rep/{seller}".encode(),
                               json.dumps([row.score_count, row.mean]).encode(), BOOKKEEPING)
        trade.scored = True
        if trade.state is TradeState.DELIVERED:
            self._set_state(trade, TradeState.SCORED, now)
        return trade

    # ------------------------------------------------------------ settlement
    def settle(self, trade_id: bytes, now: int = 0) -> Trade:
        trade = self._trade(trade_id)
        if trade.state not in (TradeState.DELIVERED, TradeState.SCORED):
            raise StateError(f"cannot settle trade in state {trade.state.value}")
        memo = self._encrypt(trade.sell_order.seller_pubkey,
                             protocol.encode("settled", id_s=trade.sell_order.seller_nonce.value))
        self._queue(now, "transfer", trade.sell_order.origin_contract, memo.blob, "settle",
                    trade.key, amount=trade.escrow)
        trade.escrow = 0
        self._set_state(trade, TradeState.SETTLED, now)
        return trade

    def expire(self, trade: Trade, now: int) -> None:
        if trade.escrow:
            memo = self._encrypt(trade.buy_order.buyer_pubkey,
                                 protocol.encode("refund", id_b=trade.buy_order.buyer_nonce.value))
            self._queue(now, "transfer", trade.buy_order.origin_contract, memo.blob, "refund",
                        trade.key, amount=trade.escrow)
            trade.escrow = 0
        self._set_state(trade, TradeState.EXPIRED, now)

    @property
    def escrow_total(self) -> int:
        return sum(t.escrow for t in self.trades.values())

    def open_trades(self) -> list[Trade]:
        return [t for t in self.trades.values() if t.state not in FINAL_STATES]

    # ------------------------------------------------------- contract hooks
    def receive(self, ledger: Ledger, msg: Delivery) -> None:
        self._ledger = ledger
        now = ledger.epoch
        try:
            self._dispatch(msg, now)
        except MarketError as exc:
            self._emit(now, "reject", ref=msg.ref,
                       detail={"entry": msg.entry, "error": type(exc).__name__})
            log.debug("broker rejected %s: %s", msg.entry, exc)

    def _dispatch(self, msg: Delivery, now: int) -> None:
        entry = msg.entry
        if entry in ("sell", "buy", "delivery", "score", "confirm") and not msg.on_ledger:
            raise StateError("broker accepts only on-ledger requests")
        if entry == "sell":
            self.handle_sell_request(Ciphertext(msg.payload), msg.sender, now, msg.ref)
        elif entry == "buy":
            self.handle_buy_request(Ciphertext(msg.payload), msg.sender, now, msg.ref)
        elif entry == "pay":
            try:
                trade_id = unb64(protocol.decode(self._decrypt(msg.payload), "pay")["trade_id"])
            except MarketError:
                if msg.amount:
                    self._queue(now, "transfer", msg.sender, b"", "refund", None, msg.amount)
                raise
            self.handle_payment(trade_id, msg.amount, now, payer=msg.sender)
        elif entry == "delivery":
            parts = crypto.unpack(msg.payload)
            if len(parts) != 2:
                raise DecryptFailure("delivery must carry routing tag and body")
            trade = self.trade_for_routing_tag(parts[0])
            if msg.sender != trade.sell_order.origin_contract:
                raise StateError("delivery from a contract other than the seller's")
            self.relay_delivery(trade.trade_id, parts[1], now)
        elif entry == "score":
            self.handle_score(Ciphertext(msg.payload), now)
        elif entry == "confirm":
            self.handle_confirm(Ciphertext(msg.payload), now)
        else:
            raise StateError(f"unknown entry point {entry!r}")

    def tick(self, ledger: Ledger, now: int) -> None:
        """End-of-epoch duties: match, invoice, enforce timeouts, settle, flush."""
        self._ledger = ledger
        cfg = self.config
        for trade in self.match(now):
            if cfg.seller_choice:
                self.offer_to_seller(trade, now)
            else:
                self.issue_invoice(trade, now)
        for trade in list(self.trades.values()):
            age = now - trade.state_epoch
            if trade.state is TradeState.SCORED:
                self.settle(trade.trade_id, now)
            elif (trade.state is TradeState.DELIVERED and trade.delivery_epoch is not None
                  and now >= trade.delivery_epoch + cfg.score_timeout):
                self.settle(trade.trade_id, now)
            elif trade.state is TradeState.MATCHED and age >= cfg.payment_timeout:
                self.expire(trade, now)
            elif trade.state is TradeState.INVOICED and age >= cfg.payment_timeout:
                self.expire(trade, now)
            elif trade.state is TradeState.SELLER_NOTIFIED and age >= cfg.delivery_timeout:
                self.expire(trade, now)
        self.flush(ledger, now)

    def flush(self, ledger: Ledger, now: int, force: bool = False) -> int:
        if not self._outbox:
            return 0
        cfg = self.config
        if cfg.batching and not force:
            oldest = min(o.queued for o in self._outbox)
            if len(self._outbox) < cfg.batch_threshold and now - oldest < cfg.batch_timeout:
                return 0
            order = self.rng.permutation(len(self._outbox))
            batch = [self._outbox[i] for i in order]
        else:
            batch = list(self._outbox)
        self._outbox = []
        for o in batch:
            if o.kind == "transfer":
                ledger.cross_chain_transfer(self.address, o.target, o.amount, o.payload,
                                            entry=o.entry, ref=o.ref)
            else:
                ledger.submit_on_ledger(OnLedgerRequest(
                    target_chain=ledger.chain_of(o.target), target_contract=o.target,
                    payload=o.payload, sender=self.address, entry=o.entry), ref=o.ref)
            if o.on_sent is not None:
                o.on_sent(now)
        return len(batch)

    @property
    def outbox_size(self) -> int:
        return len(self._outbox)
