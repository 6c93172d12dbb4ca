"""Per-trade cost accounting and throughput, computed from a run trace."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

from .errors import TradeIncomplete, ZeroPrice
from .trace import TradeTrace

# On-ledger hops of one trade with default settings: sell forward, buy forward,
# invoice, payment, seller notice, delivery forward, delivery relay, score
# forward, settlement transfer.
HAPPY_PATH_L1_TXS = 9
# A buyer that never scores saves the score forward.
SILENT_BUYER_L1_TXS = HAPPY_PATH_L1_TXS - 1
# Wallet-to-contract calls: sell, buy, pay confirmation, delivery, score.
HAPPY_PATH_OFF_LEDGER = 5

_REQUEST_TYPES = ("off_ledger", "on_ledger", "transfer")


@dataclass
class TradeCost:
    trade_id: str
    l1_tx_count: int
    off_ledger_count: int
    gas_total: int
    price: int
    gas_to_price_ratio: Optional[float]


@dataclass
class CostReport:
    trades: list[TradeCost] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def trade_refs(trace: TradeTrace, trade_id: str) -> set[str]:
    m = trace.matches().get(trade_id)
    if m is None:
        raise TradeIncomplete(f"no trade {trade_id} in trace")
    return {trade_id, m["sell_ref"], m["buy_ref"]} - {None}


def account_trade(trace: TradeTrace, trade_id: str) -> TradeCost:
    if trace.trade_states().get(trade_id) != "Settled":
        raise TradeIncomplete(f"trade {trade_id} did not settle")
    refs = trade_refs(trace, trade_id)
    events = [e for e in trace.of_type(*_REQUEST_TYPES) if e.ref in refs]
    price = trace.matches()[trade_id]["price"]
    gas = sum(e.gas for e in events)
    return TradeCost(
        trade_id=trade_id,
        l1_tx_count=sum(1 for e in events if e.l1_tx),
        off_ledger_count=sum(1 for e in events if e.event_type == "off_ledger"),
        gas_total=gas,
        price=price,
        gas_to_price_ratio=gas / price if price > 0 else None,
    )


def gas_to_price_ratio(gas_total: int | TradeCost, price: Optional[int] = None) -> float:
    if isinstance(gas_total, TradeCost):
        gas_total, price = gas_total.gas_total, gas_total.price
    if not price:
        raise ZeroPrice("gas-to-price ratio undefined for a zero price")
    return gas_total / price


def throughput(trace: TradeTrace) -> float:
    """Settled trades per elapsed epoch."""
    epochs = trace.n_epochs
    return len(trace.settled_trades()) / epochs if epochs > 0 else 0.0


def cost_report(trace: TradeTrace) -> CostReport:
    rows = [account_trade(trace, t) for t in trace.settled_trades()]
    return CostReport(rows, {
        "trades": len(rows),
        "epochs": trace.n_epochs,
        "trades_per_epoch": throughput(trace),
        "l1_tx_total": trace.l1_tx_count,
        "gas_total": sum(e.gas for e in trace.events),
    })
