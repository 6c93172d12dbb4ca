"""
Simulated L1 transaction log plus L2 smart-contract chains.

Time advances in discrete epochs.  Anything submitted during epoch ``e`` (an
off-ledger API call or an on-ledger request) is delivered to the target
contract at epoch ``e + 1``.  At the end of each epoch every chain serializes
its pending state writes into a block made only of key/value mutations and
anchors a digest of its state on L1.

Token accounting is account-based: an on-ledger request or cross-chain
transfer debits and credits atomically at submission; the payload reaches the
recipient contract one epoch later.
"""

from __future__ import annotations

import enum
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

from .errors import (
    InsufficientBalance,
    InvalidInput,
    InvariantViolation,
    UnknownChain,
    UnknownContract,
)
from .trace import TradeTrace

log = logging.getLogger(__name__)

COMMITMENT_LEN = 32

# write tags
CIPHERTEXT = "ciphertext"
BOOKKEEPING = "bookkeeping"
SEALED = "sealed"  # enclave-sealed state, consortium chain only


class ChainKind(enum.Enum):
    PERMISSIONLESS = "permissionless"
    CONSORTIUM = "consortium"


@dataclass(frozen=True)
class ChainId:
    id: str
    kind: ChainKind = ChainKind.PERMISSIONLESS

    def __str__(self) -> str:
        return self.id


@dataclass
class ChainBlock:
    height: int
    epoch: int
    mutations: list[tuple[bytes, bytes]]
    tags: list[str] = field(default_factory=list, repr=False)


@dataclass
class OnLedgerRequest:
    target_chain: str
    target_contract: str
    payload: bytes = b""
    carried_assets: int = 0
    sender: str = ""
    entry: str = "call"


@dataclass
class OffLedgerRequest:
    target_chain: str
    target_contract: str
    payload: bytes = b""
    sender: str = ""
    entry: str = "call"
    amount: int = 0
    route: Optional[str] = None


@dataclass(frozen=True)
class AnchorTx:
    chain: str
    state_commitment: bytes
    epoch: int


@dataclass(frozen=True)
class Receipt:
    target_contract: str
    deliver_epoch: int


@dataclass
class Delivery:
    """What a contract sees when a request reaches it."""

    entry: str
    payload: bytes
    sender: str
    sender_chain: Optional[str]
    amount: int
    on_ledger: bool
    epoch: int
    ref: Optional[str] = None
    route: Optional[str] = None


@dataclass
class GasTariff:
    off_ledger_gas: int = 0
    on_ledger_gas: int = 1

    def __post_init__(self):
        if self.off_ledger_gas < 0 or self.on_ledger_gas < 0:
            raise InvalidInput("gas tariff must be non-negative")


class Contract(Protocol):
    address: str
    chain: str

    def receive(self, ledger: "Ledger", msg: Delivery) -> None: ...


@dataclass
class _Chain:
    cid: ChainId
    contracts: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)
    pending: list = field(default_factory=list)
    blocks: list = field(default_factory=list)
    last_block_epoch: int = -1
    last_anchor_epoch: int = -1


def contract_address(chain: str, name: str) -> str:
    return hashlib.sha256(f"{chain}/{name}".encode()).hexdigest()[:40]


def state_commitment(chain: str, state: dict) -> bytes:
    """One-way digest of a chain's key/value state; fixed length regardless of size."""
    h = hashlib.sha256()
    h.update(chain.encode())
    for k in sorted(state):
        v = state[k]
        h.update(len(k).to_bytes(4, "big") + k + len(v).to_bytes(4, "big") + v)
    return h.digest()


class Ledger:
    def __init__(
        self,
        gas: Optional[GasTariff] = None,
        trace: Optional[TradeTrace] = None,
        ciphertext_lengths: Optional[Sequence[int]] = None,
    ):
        self.gas = gas or GasTariff()
        self.trace = trace if trace is not None else TradeTrace()
        self.ciphertext_lengths = set(ciphertext_lengths) if ciphertext_lengths else None
        self.epoch = 0
        self.chains: dict[str, _Chain] = {}
        self.accounts: dict[str, int] = {}
        self.gas_sink = 0
        self.minted = 0
        self.n_on_ledger = 0
        self.n_transfers = 0
        self.n_anchors = 0
        self.n_off_ledger = 0
        self._queue: list[tuple[int, int, str, Delivery]] = []
        self._seq = 0
        self._owner_chain: dict[str, str] = {}

    # -- setup -------------------------------------------------------------
    def add_chain(self, cid: ChainId) -> ChainId:
        if cid.kind is ChainKind.CONSORTIUM and any(
            c.cid.kind is ChainKind.CONSORTIUM for c in self.chains.values()
        ):
            raise InvalidInput("only one consortium chain per scenario")
        self.chains[cid.id] = _Chain(cid)
        return cid

    def chain(self, chain_id: str) -> _Chain:
        try:
            return self.chains[chain_id]
        except KeyError:
            raise UnknownChain(chain_id) from None

    def deploy(self, chain_id: str, contract, name: str) -> str:
        ch = self.chain(chain_id)
        addr = contract_address(chain_id, name)
        contract.address = addr
        contract.chain = chain_id
        ch.contracts[addr] = contract
        self.accounts.setdefault(addr, 0)
        self._owner_chain[addr] = chain_id
        return addr

    def contract(self, chain_id: str, address: str):
        ch = self.chain(chain_id)
        try:
            return ch.contracts[address]
        except KeyError:
            raise UnknownContract(address) from None

    def chain_of(self, address: str) -> Optional[str]:
        return self._owner_chain.get(address)

    def mint(self, owner: str, amount: int) -> None:
        """Scenario-setup token creation; the only operation that changes supply."""
        if amount < 0:
            raise InvalidInput("negative mint")
        self.accounts[owner] = self.accounts.get(owner, 0) + amount
        self.minted += amount
        self.trace.emit(self.epoch, "mint", amount=amount, detail={"owner": owner})

    def balance(self, owner: str) -> int:
        return self.accounts.get(owner, 0)

    def total_supply(self) -> int:
        return sum(self.accounts.values()) + self.gas_sink

    # -- requests ------------------------------------------------------------
    def _charge(self, owner: str, amount: int, gas: int) -> None:
        if amount < 0:
            raise InvalidInput("negative amount")
        bal = self.accounts.get(owner, 0)
        if bal < amount + gas:
            raise InsufficientBalance(f"{owner}: balance {bal} < {amount} + gas {gas}")
        self.accounts[owner] = bal - amount - gas
        self.gas_sink += gas

    def _enqueue(self, address: str, msg: Delivery) -> int:
        deliver = self.epoch + 1
        self._queue.append((deliver, self._seq, address, msg))
        self._seq += 1
        return deliver

    def submit_off_ledger(self, req: OffLedgerRequest, ref: Optional[str] = None) -> Receipt:
        """Wallet-to-contract API call.  Never produces an L1 transaction."""
        self.contract(req.target_chain, req.target_contract)
        gas = self.gas.off_ledger_gas
        if gas:
            self._charge(req.sender, 0, gas)
        msg = Delivery(req.entry, req.payload, req.sender, None, req.amount, False,
                       self.epoch + 1, ref, req.route)
        deliver = self._enqueue(req.target_contract, msg)
        self.n_off_ledger += 1
        self.trace.emit(self.epoch, "off_ledger", chain=req.target_chain, l1_tx=False,
                        gas=gas, payload_len=len(req.payload), ref=ref,
                        detail={"entry": req.entry})
        return Receipt(req.target_contract, deliver)

    def submit_on_ledger(self, req: OnLedgerRequest, ref: Optional[str] = None) -> int:
        """Contract call wrapped in one L1 transaction; returns the L1 tx id."""
        src_chain = self.chain_of(req.sender)
        self.contract(req.target_chain, req.target_contract)
        gas = self.gas.on_ledger_gas
        self._charge(req.sender, req.carried_assets, gas)
        self.accounts[req.target_contract] = (
            self.accounts.get(req.target_contract, 0) + req.carried_assets
        )
        msg = Delivery(req.entry, req.payload, req.sender, src_chain, req.carried_assets,
                       True, self.epoch + 1, ref)
        self._enqueue(req.target_contract, msg)
        self.n_on_ledger += 1
        self.trace.emit(self.epoch, "on_ledger", chain=src_chain, dst_chain=req.target_chain,
                        l1_tx=True, gas=gas, payload_len=len(req.payload), ref=ref,
                        amount=req.carried_assets or None, detail={"entry": req.entry})
        return self._l1_id()

    def cross_chain_transfer(self, src: str, dst: str, amount: int, payload: bytes = b"",
                             entry: str = "transfer", ref: Optional[str] = None) -> int:
        """Atomic debit/credit between contracts on different chains: one L1 tx."""
        dst_chain = self.chain_of(dst)
        if dst_chain is None:
            raise UnknownContract(dst)
        src_chain = self.chain_of(src)
        gas = self.gas.on_ledger_gas
        self._charge(src, amount, gas)
        self.accounts[dst] = self.accounts.get(dst, 0) + amount
        msg = Delivery(entry, payload, src, src_chain, amount, True, self.epoch + 1, ref)
        self._enqueue(dst, msg)
        self.n_transfers += 1
        self.trace.emit(self.epoch, "transfer", chain=src_chain, dst_chain=dst_chain,
                        l1_tx=True, gas=gas, payload_len=len(payload), ref=ref,
                        amount=amount, detail={"entry": entry})
        return self._l1_id()

    def _l1_id(self) -> int:
        return self.n_on_ledger + self.n_transfers + self.n_anchors - 1

    @property
    def l1_tx_count(self) -> int:
        return self.n_on_ledger + self.n_transfers + self.n_anchors

    def pending_deliveries(self) -> int:
        return len(self._queue)

    def due(self, epoch: int) -> list[tuple[str, Delivery]]:
        """Pop every delivery scheduled for ``epoch`` in submission order."""
        ready = sorted((q for q in self._queue if q[0] <= epoch), key=lambda q: (q[0], q[1]))
        self._queue = [q for q in self._queue if q[0] > epoch]
        return [(addr, msg) for _, _, addr, msg in ready]

    def deliver_due(self, epoch: int) -> int:
        n = 0
        for addr, msg in self.due(epoch):
            self.contract(self._owner_chain[addr], addr).receive(self, msg)
            n += 1
        return n

    # -- state & blocks ---------------------------------------------------------
    def write(self, address: str, key: bytes, value: bytes, tag: str) -> None:
        """Contract state write; must come from a contract on that chain."""
        chain_id = self.chain_of(address)
        if chain_id is None:
            raise UnknownContract(address)
        ch = self.chains[chain_id]
        if tag not in (CIPHERTEXT, BOOKKEEPING, SEALED):
            raise InvalidInput(f"unknown write tag {tag!r}")
        if tag == SEALED and ch.cid.kind is not ChainKind.CONSORTIUM:
            raise InvariantViolation("block_opacity", "sealed writes only on the consortium chain")
        if (tag == CIPHERTEXT and self.ciphertext_lengths is not None
                and ch.cid.kind is ChainKind.PERMISSIONLESS
                and len(value) not in self.ciphertext_lengths):
            raise InvariantViolation("bucket_lengths", f"{len(value)} not a bucket size")
        ch.pending.append((key, value, tag))

    def produce_block(self, chain_id: str, epoch: int) -> ChainBlock:
        ch = self.chain(chain_id)
        latest: dict[bytes, tuple[bytes, str]] = {}
        for key, value, tag in ch.pending:
            latest[key] = (value, tag)
        ch.pending = []
        keys = sorted(latest)
        mutations = [(k, latest[k][0]) for k in keys]
        tags = [latest[k][1] for k in keys]
        for k, v in mutations:
            ch.state[k] = v
        block = ChainBlock(height=len(ch.blocks), epoch=epoch, mutations=mutations, tags=tags)
        ch.blocks.append(block)
        ch.last_block_epoch = epoch
        self.trace.emit(epoch, "block", chain=chain_id,
                        payload_len=sum(len(k) + len(v) for k, v in mutations),
                        detail={"height": block.height,
                                "mutations": [[k.hex(), v.hex()] for k, v in mutations],
                                "tags": tags})
        return block

    def anchor_chain(self, chain_id: str, epoch: int) -> AnchorTx:
        ch = self.chain(chain_id)
        if ch.last_block_epoch != epoch:
            raise InvalidInput(f"{chain_id} has no block for epoch {epoch}")
        if ch.last_anchor_epoch == epoch:
            raise InvalidInput(f"{chain_id} already anchored in epoch {epoch}")
        tx = AnchorTx(chain_id, state_commitment(chain_id, ch.state), epoch)
        ch.last_anchor_epoch = epoch
        self.n_anchors += 1
        self.trace.emit(epoch, "anchor", chain=chain_id, l1_tx=True,
                        payload_len=COMMITMENT_LEN,
                        detail={"commitment": tx.state_commitment.hex()})
        return tx

    def blocks(self, chain_id: str) -> list[ChainBlock]:
        return list(self.chain(chain_id).blocks)

    def check_conservation(self) -> None:
        if any(b < 0 for b in self.accounts.values()):
            raise InvariantViolation("token_conservation", "negative balance")
        if self.total_supply() != self.minted:
            raise InvariantViolation(
                "token_conservation", f"supply {self.total_supply()} != minted {self.minted}"
            )
