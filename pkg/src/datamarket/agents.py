"""
Seller and buyer agents plus the user contracts they deploy on their chains.

An agent talks only to its own contract, via off-ledger requests.  The
contract stores whatever it is handed as ciphertext mutations, forwards
broker-bound traffic on-ledger, and hands inbound broker messages back to its
owner.  Each agent reacts to a message after a random delay drawn from
``[0, delay_max]`` epochs.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import crypto, protocol
from .blobstore import BlobStore, ContentAddress
from .broker import Invoice, PriceTable, SCORE_RANGE
from .ca import Certificate, is_plausible
from .crypto import Ciphertext, KeyPair, Nonce, NonceRegistry, SymmetricKey
from .errors import (
    CertExpiredLocally,
    DecryptFailure,
    EmptyBlob,
    InsufficientFunds,
    MarketError,
    NonceMismatch,
    NotFound,
    PriceMismatch,
    StateError,
    StorageFailure,
)
from .ledger import BOOKKEEPING, CIPHERTEXT, Delivery, Ledger, OffLedgerRequest, OnLedgerRequest
from .protocol import PLAUSIBLE_RANGES, DataDescription, SensorType, b64, unb64

log = logging.getLogger(__name__)

HIGH_SCORE, LOW_SCORE = SCORE_RANGE[1], SCORE_RANGE[0]


# ---------------------------------------------------------------------------
# User contracts
# ---------------------------------------------------------------------------

class UserContract:
    """A seller's or buyer's own contract on a permissionless chain."""

    BROKER_BOUND = ("sell", "buy", "delivery", "score", "confirm")

    def __init__(self, owner_wallet: str):
        self.owner_wallet = owner_wallet
        self.owner: Optional["Agent"] = None
        self.address = ""
        self.chain = ""
        self._n_out = 0
        self._n_in = 0

    def _write(self, ledger: Ledger, direction: str, n: int, entry: str, parts) -> None:
        for i, part in enumerate(parts):
            if part:
                key = f"{self.address}/{direction}/{n}/{entry}/{i}".encode()
                ledger.write(self.address, key, part, CIPHERTEXT)

    def receive(self, ledger: Ledger, msg: Delivery) -> None:
        now = ledger.epoch
        try:
            if not msg.on_ledger:
                self._from_owner(ledger, msg)
            else:
                self._from_l1(ledger, msg, now)
        except MarketError as exc:
            ledger.trace.emit(now, "reject", chain=self.chain, ref=msg.ref,
                              detail={"entry": msg.entry, "error": type(exc).__name__})

    def _from_owner(self, ledger: Ledger, msg: Delivery) -> None:
        if msg.sender != self.owner_wallet:
            raise StateError("off-ledger call from a wallet that does not own this contract")
        route = msg.route
        n = self._n_out
        self._n_out += 1
        if msg.entry == "pay":
            self._write(ledger, "out", n, "pay", [msg.payload])
            ledger.cross_chain_transfer(self.address, route, msg.amount, msg.payload,
                                        entry="pay", ref=msg.ref)
            return
        if msg.entry not in self.BROKER_BOUND:
            raise StateError(f"unknown entry {msg.entry!r}")
        parts = crypto.unpack(msg.payload) if msg.entry == "delivery" else [msg.payload]
        self._write(ledger, "out", n, msg.entry, parts)
        ledger.submit_on_ledger(OnLedgerRequest(
            target_chain=ledger.chain_of(route), target_contract=route, payload=msg.payload,
            sender=self.address, entry=msg.entry), ref=msg.ref)

    def _from_l1(self, ledger: Ledger, msg: Delivery, now: int) -> None:
        n = self._n_in
        self._n_in += 1
        self._write(ledger, "in", n, msg.entry, [msg.payload])
        if msg.amount:
            key = f"{self.address}/in/{n}/{msg.entry}/amount".encode()
            ledger.write(self.address, key, str(msg.amount).encode(), BOOKKEEPING)
        if self.owner is not None:
            self.owner.deliver(msg.entry, msg.payload, msg.amount, now)


class ReplayAttacker:
    """Adversarial contract that re-submits captured ciphertexts to the broker."""

    def __init__(self):
        self.address = ""
        self.chain = ""

    def receive(self, ledger: Ledger, msg: Delivery) -> None:
        pass

    def replay(self, ledger: Ledger, broker: str, entry: str, blob: bytes,
               ref: Optional[str] = None) -> None:
        ledger.submit_on_ledger(OnLedgerRequest(
            target_chain=ledger.chain_of(broker), target_contract=broker, payload=blob,
            sender=self.address, entry=entry), ref=ref)


# ---------------------------------------------------------------------------
# Agents
# ---------------------------------------------------------------------------

@dataclass
class BrokerInfo:
    address: str
    public_key: bytes


@dataclass
class AgentEnv:
    """What every agent shares: the ledger, storage and public market facts."""

    ledger: Ledger
    blobstore: BlobStore
    prices: PriceTable
    brokers: Callable[[SensorType], BrokerInfo]
    buckets: Optional[Sequence[int]] = crypto.DEFAULT_BUCKETS
    registry: NonceRegistry = field(default_factory=NonceRegistry)


class Agent:
    kind = "agent"

    def __init__(self, name: str, env: AgentEnv, rng: np.random.Generator,
                 delay_max: int = 0, plan: Sequence[DataDescription] = ()):
        self.name = name
        self.wallet = f"wallet:{name}"
        self.env = env
        self.rng = rng
        self.delay_max = delay_max
        self.plan = list(plan)
        self.trade_index = -1
        self.contract: Optional[UserContract] = None
        self.knowledge: list[dict] = []  # own plaintexts, for insider views
        self.log: list[tuple[int, str]] = []
        self._scheduled: list[tuple[int, int, Callable[[int], None]]] = []
        self._seq = 0

    # -- scheduling -----------------------------------------------------------
    def _delay(self) -> int:
        return int(self.rng.integers(0, self.delay_max + 1)) if self.delay_max else 0

    def schedule(self, epoch: int, fn: Callable[[int], None]) -> None:
        self._scheduled.append((epoch, self._seq, fn))
        self._seq += 1

    def deliver(self, entry: str, payload: bytes, amount: int, epoch: int) -> None:
        handler = getattr(self, f"_on_{entry}", None)
        if handler is None:
            return
        self.schedule(epoch + self._delay(), lambda now: handler(payload, amount, now))

    def tick(self, epoch: int) -> None:
        if self.is_idle and self.plan and not self._scheduled:
            dd = self.plan.pop(0)
            self.schedule(epoch + self._delay(), lambda now: self._start(dd, now))
        due = sorted(s for s in self._scheduled if s[0] <= epoch)
        self._scheduled = [s for s in self._scheduled if s[0] > epoch]
        for _, _, fn in due:
            fn(epoch)

    @property
    def busy(self) -> bool:
        return bool(self._scheduled) or (self.is_idle and bool(self.plan))

    @property
    def is_idle(self) -> bool:
        raise NotImplementedError

    def _start(self, dd: DataDescription, now: int) -> None:
        raise NotImplementedError

    # -- helpers -----------------------------------------------------------------
    @property
    def ref(self) -> str:
        return f"{self.kind[0].upper()}{self.name_index}.{self.trade_index}"

    @property
    def name_index(self) -> str:
        return "".join(ch for ch in self.name if ch.isdigit()) or self.name

    @property
    def ledger(self) -> Ledger:
        return self.env.ledger

    def _encrypt(self, pk: bytes, msg: bytes) -> Ciphertext:
        return crypto.hybrid_encrypt(pk, msg, self.env.buckets, self.rng)

    def _fresh(self) -> tuple[KeyPair, Nonce]:
        keys = crypto.keygen(self.rng)
        nonce = crypto.new_nonce(self.rng)
        self.env.registry.register(keys.public)
        self.env.registry.register(nonce.value)
        return keys, nonce

    def _send(self, entry: str, payload: bytes, route: str, amount: int = 0) -> OffLedgerRequest:
        req = OffLedgerRequest(target_chain=self.contract.chain,
                               target_contract=self.contract.address, payload=payload,
                               sender=self.wallet, entry=entry, amount=amount, route=route)
        self.ledger.submit_off_ledger(req, ref=self.ref)
        return req

    def _abort(self, now: int, exc: Exception) -> None:
        self.log.append((now, type(exc).__name__))
        self.ledger.trace.emit(now, "abort", chain=self.contract.chain if self.contract else None,
                               ref=self.ref, detail={"agent": self.name,
                                                     "error": type(exc).__name__})


class SellerState(str, enum.Enum):
    IDLE = "Idle"
    REQUESTED = "Requested"
    NOTIFIED = "Notified"
    STORED = "Stored"
    DELIVERY_SENT = "DeliverySent"
    SETTLED = "Settled"


class BuyerState(str, enum.Enum):
    IDLE = "Idle"
    REQUESTED = "Requested"
    INVOICED = "Invoiced"
    PAID = "Paid"
    RECEIVED = "Received"
    SCORED = "Scored"


def synth_samples(sensor_type: SensorType, n: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded synthetic readings inside the sensor type's plausible range."""
    lo, hi = PLAUSIBLE_RANGES[SensorType(sensor_type)]
    if sensor_type is SensorType.GENERIC:
        lo, hi = -1000.0, 1000.0
    mid, spread = (lo + hi) / 2, (hi - lo) / 8
    return np.clip(rng.normal(mid, spread, size=n), lo, hi).astype(np.float32)


class SellerAgent(Agent):
    kind = "seller"

    def __init__(self, name: str, env: AgentEnv, rng: np.random.Generator,
                 cert: Certificate, delay_max: int = 0,
                 plan: Sequence[DataDescription] = (), faults: Optional[dict] = None):
        super().__init__(name, env, rng, delay_max, plan)
        self.cert = cert
        self.faults = faults or {}  # trade index -> fault name
        self.state = SellerState.IDLE
        self.dd: Optional[DataDescription] = None
        self.keys: Optional[KeyPair] = None
        self.id_s: Optional[Nonce] = None
        self.past_nonces: list[Nonce] = []
        self.data: bytes = b""
        self.buyer_pubkey: Optional[bytes] = None
        self.id_b: Optional[Nonce] = None
        self.sym_key: Optional[SymmetricKey] = None
        self.address: Optional[ContentAddress] = None
        self.sell_request: Optional[Ciphertext] = None
        self.raw_data_history: list[bytes] = []
        self.sym_key_history: list[bytes] = []
        self.settled = 0

    @property
    def is_idle(self) -> bool:
        return self.state in (SellerState.IDLE, SellerState.SETTLED)

    @property
    def broker(self) -> BrokerInfo:
        return self.env.brokers(self.cert.sensor_type)

    def _start(self, dd: DataDescription, now: int) -> None:
        try:
            self.seller_start_trade(dd, now)
        except MarketError as exc:
            self._abort(now, exc)

    def seller_start_trade(self, dd: DataDescription, now: int = 0) -> OffLedgerRequest:
        if not self.is_idle:
            raise StateError(f"seller busy ({self.state.value})")
        if now >= self.cert.expires_at:
            raise CertExpiredLocally(f"certificate expired at {self.cert.expires_at}")
        dd.validate()
        if self.id_s is not None:
            self.past_nonces.append(self.id_s)
        self.trade_index += 1
        self.dd = dd
        self.keys, self.id_s = self._fresh()
        self.buyer_pubkey = self.id_b = self.sym_key = self.address = None
        self.data = synth_samples(dd.sensor_type, dd.volume, self.rng).tobytes()
        self.raw_data_history.append(self.data)
        msg = protocol.encode("sell", dd=dd.to_dict(), cert=self.cert.to_dict(),
                              id_s=self.id_s.value, ku_seller=self.keys.public)
        self.sell_request = self._encrypt(self.broker.public_key, msg)
        self.state = SellerState.REQUESTED
        return self._send("sell", self.sell_request.blob, self.broker.address)

    def _on_notice(self, payload: bytes, amount: int, now: int) -> None:
        try:
            self.seller_handle_notice(Ciphertext(payload))
            self.seller_deliver(now)
        except MarketError as exc:
            self._abort(now, exc)
            self.state = SellerState.IDLE

    def seller_handle_notice(self, c) -> None:
        if self.state is not SellerState.REQUESTED:
            raise StateError(f"notice while {self.state.value}")
        d = protocol.decode(crypto.hybrid_decrypt(self.keys.secret, c), "notice")
        if unb64(d["id_s"]) != self.id_s.value:
            raise NonceMismatch("notice does not carry this trade's seller nonce")
        self.buyer_pubkey = unb64(d["ku_buyer"])
        self.id_b = Nonce(unb64(d["id_b"]))
        self.knowledge.append({"trade": self.trade_index, "ku_buyer": self.buyer_pubkey,
                               "id_b": self.id_b.value, "id_s": self.id_s.value})
        self.state = SellerState.NOTIFIED

    def seller_deliver(self, now: int = 0) -> OffLedgerRequest:
        if self.state is not SellerState.NOTIFIED:
            raise StateError(f"deliver while {self.state.value}")
        self.sym_key = crypto.new_symmetric_key(self.rng)
        self.sym_key_history.append(self.sym_key.key)
        try:
            self.address = self.env.blobstore.put(crypto.sym_encrypt(self.sym_key, self.data,
                                                                     self.rng))
        except EmptyBlob as exc:
            raise StorageFailure(str(exc)) from exc
        self.state = SellerState.STORED
        k_s = self.sym_key.key
        if self.faults.get(self.trade_index) == "wrong_key":
            k_s = crypto.new_symmetric_key(self.rng).key
        body = self._encrypt(self.buyer_pubkey, protocol.encode(
            "delivery", id_b=self.id_b.value, address=self.address.digest, k_s=k_s))
        tag = self._encrypt(self.broker.public_key, protocol.encode("route", id_s=self.id_s.value))
        self.state = SellerState.DELIVERY_SENT
        return self._send("delivery", crypto.pack(tag.blob, body.blob), self.broker.address)

    def _on_offer(self, payload: bytes, amount: int, now: int) -> None:
        try:
            d = protocol.decode(crypto.hybrid_decrypt(self.keys.secret, payload), "offer")
            if unb64(d["id_s"]) != self.id_s.value:
                raise NonceMismatch("offer for another trade")
            msg = protocol.encode("confirm", trade_id=unb64(d["trade_id"]), id_s=self.id_s.value,
                                  accept=True)
            self._send("confirm", self._encrypt(self.broker.public_key, msg).blob,
                       self.broker.address)
        except MarketError as exc:
            self._abort(now, exc)

    def _on_settle(self, payload: bytes, amount: int, now: int) -> None:
        try:
            d = protocol.decode(crypto.hybrid_decrypt(self.keys.secret, payload), "settled")
        except MarketError:
            return
        if self.id_s is not None and unb64(d["id_s"]) == self.id_s.value:
            self.settled += 1
            self.state = SellerState.SETTLED


class BuyerAgent(Agent):
    kind = "buyer"

    def __init__(self, name: str, env: AgentEnv, rng: np.random.Generator,
                 delay_max: int = 0, plan: Sequence[DataDescription] = (),
                 faults: Optional[dict] = None):
        super().__init__(name, env, rng, delay_max, plan)
        self.faults = faults or {}
        self.state = BuyerState.IDLE
        self.dd: Optional[DataDescription] = None
        self.keys: Optional[KeyPair] = None
        self.id_b: Optional[Nonce] = None
        self.invoice: Optional[Invoice] = None
        self.received: list[bytes] = []
        self.last_data: Optional[bytes] = None
        self.last_quality: Optional[int] = None
        self.sym_key_history: list[bytes] = []

    @property
    def is_idle(self) -> bool:
        return self.state in (BuyerState.IDLE, BuyerState.SCORED)

    @property
    def balance(self) -> int:
        return self.ledger.balance(self.contract.address)

    @property
    def broker(self) -> BrokerInfo:
        return self.env.brokers(self.dd.sensor_type)

    def _fault(self) -> Optional[str]:
        return self.faults.get(self.trade_index)

    def _start(self, dd: DataDescription, now: int) -> None:
        try:
            self.buyer_start_trade(dd)
        except MarketError as exc:
            self._abort(now, exc)

    def buyer_start_trade(self, dd: DataDescription) -> OffLedgerRequest:
        if not self.is_idle:
            raise StateError(f"buyer busy ({self.state.value})")
        if self.balance <= 0:
            raise InsufficientFunds("no funds to trade with")
        dd.validate()
        self.trade_index += 1
        self.dd = dd
        self.invoice = None
        self.last_data = self.last_quality = None
        self.keys, self.id_b = self._fresh()
        msg = protocol.encode("buy", dd=dd.to_dict(), id_b=self.id_b.value,
                              ku_buyer=self.keys.public)
        c = self._encrypt(self.broker.public_key, msg)
        self.state = BuyerState.REQUESTED
        return self._send("buy", c.blob, self.broker.address)

    def _on_invoice(self, payload: bytes, amount: int, now: int) -> None:
        try:
            self.buyer_handle_invoice(Ciphertext(payload))
        except MarketError as exc:
            self._abort(now, exc)
            self.state = BuyerState.IDLE

    def buyer_handle_invoice(self, c) -> OffLedgerRequest:
        """Check the invoice against the public price table and pay it."""
        if self.state is not BuyerState.REQUESTED:
            raise StateError(f"invoice while {self.state.value}")
        inv = Invoice.decode(crypto.hybrid_decrypt(self.keys.secret, c))
        expected = self.env.prices.price_for(self.dd)
        if inv.price != expected:
            raise PriceMismatch(f"invoice {inv.price}, expected {expected}")
        gas = self.ledger.gas.on_ledger_gas
        if self.balance < inv.price + gas:
            raise InsufficientFunds(f"balance {self.balance} < {inv.price} + gas {gas}")
        self.invoice = inv
        self.state = BuyerState.INVOICED
        amount = inv.price - 1 if self._fault() == "wrong_amount" else inv.price
        memo = self._encrypt(self.broker.public_key, protocol.encode("pay", trade_id=inv.trade_id))
        req = self._send("pay", memo.blob, inv.pay_to, amount=amount)
        self.state = BuyerState.PAID
        return req

    def _on_delivery(self, payload: bytes, amount: int, now: int) -> None:
        try:
            self.buyer_handle_delivery(Ciphertext(payload))
        except DecryptFailure as exc:
            # undecryptable data still gets a (zero) score
            self._abort(now, exc)
            self.state = BuyerState.RECEIVED
            self.last_quality = LOW_SCORE
        except MarketError as exc:
            self._abort(now, exc)
            self.state = BuyerState.IDLE
            return
        if self._fault() == "silent_buyer":
            self.state = BuyerState.IDLE
            return
        self.buyer_score(self.last_quality)

    def buyer_handle_delivery(self, c) -> bytes:
        if self.state is not BuyerState.PAID:
            raise StateError(f"delivery while {self.state.value}")
        d = protocol.decode(crypto.hybrid_decrypt(self.keys.secret, c), "delivery")
        if unb64(d["id_b"]) != self.id_b.value:
            raise NonceMismatch("delivery does not carry this trade's buyer nonce")
        k_s = SymmetricKey(unb64(d["k_s"]))
        self.sym_key_history.append(k_s.key)
        self.knowledge.append({"trade": self.trade_index, "address": unb64(d["address"]),
                               "id_b": self.id_b.value})
        blob = self.env.blobstore.get(ContentAddress(unb64(d["address"])))
        data = crypto.sym_decrypt(k_s, blob)
        self.last_data = data
        self.received.append(data)
        self.last_quality = self.assess(data)
        self.state = BuyerState.RECEIVED
        return data

    def assess(self, data: bytes) -> int:
        """Full marks when the data has the requested volume and plausible readings."""
        if len(data) % 4:
            return LOW_SCORE
        samples = np.frombuffer(data, dtype=np.float32)
        ok = samples.size >= self.dd.volume and is_plausible(self.dd.sensor_type, samples)
        return HIGH_SCORE if ok else LOW_SCORE

    def buyer_score(self, quality: int) -> OffLedgerRequest:
        if self.state is not BuyerState.RECEIVED:
            raise StateError(f"score while {self.state.value}")
        msg = protocol.encode("score", trade_id=self.invoice.trade_id, score=int(quality))
        req = self._send("score", self._encrypt(self.broker.public_key, msg).blob,
                         self.broker.address)
        self.state = BuyerState.SCORED
        return req

    def _on_refund(self, payload: bytes, amount: int, now: int) -> None:
        self.log.append((now, f"refund:{amount}"))
