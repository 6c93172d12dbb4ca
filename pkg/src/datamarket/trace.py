"""Run trace: one record per simulator event, serialized as JSON lines."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional

# Event types an outside observer could in principle see (subject to which
# chain they refer to).  Everything else is simulator bookkeeping.
L1_EVENT_TYPES = ("on_ledger", "transfer", "anchor")
PUBLIC_EVENT_TYPES = L1_EVENT_TYPES + ("block",)


@dataclass
class TraceEvent:
    epoch: int
    event_type: str
    chain: Optional[str] = None
    l1_tx: bool = False
    gas: int = 0
    payload_len: int = 0
    dst_chain: Optional[str] = None
    ref: Optional[str] = None
    amount: Optional[int] = None
    detail: Optional[dict] = None

    def to_dict(self) -> dict:
        d = {
            "epoch": self.epoch,
            "event_type": self.event_type,
            "chain": self.chain,
            "l1_tx": self.l1_tx,
            "gas": self.gas,
            "payload_len": self.payload_len,
        }
        for name in ("dst_chain", "ref", "amount", "detail"):
            value = getattr(self, name)
            if value is not None:
                d[name] = value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TraceEvent":
        return cls(**d)


@dataclass
class TradeTrace:
    events: list[TraceEvent] = field(default_factory=list)

    def emit(self, epoch: int, event_type: str, **kwargs: Any) -> TraceEvent:
        ev = TraceEvent(epoch=epoch, event_type=event_type, **kwargs)
        self.events.append(ev)
        return ev

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def of_type(self, *types: str) -> list[TraceEvent]:
        return [e for e in self.events if e.event_type in types]

    # -- serialization -----------------------------------------------------
    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(e.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"
            for e in self.events
        )

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "TradeTrace":
        return cls([TraceEvent.from_dict(json.loads(ln)) for ln in lines if ln.strip()])

    @classmethod
    def read(cls, path: str | Path) -> "TradeTrace":
        return cls.from_lines(Path(path).read_text(encoding="utf-8").splitlines())

    # -- queries -------------------------------------------------------------
    @property
    def l1_tx_count(self) -> int:
        return sum(1 for e in self.events if e.l1_tx)

    @property
    def n_epochs(self) -> int:
        ends = self.of_type("run_end")
        if ends:
            return ends[-1].detail["epochs"]
        return max((e.epoch for e in self.events), default=-1) + 1

    def matches(self) -> dict[str, dict]:
        """trade_id -> ground-truth record of the match."""
        return {e.ref: e.detail for e in self.of_type("match")}

    def trade_states(self) -> dict[str, str]:
        states: dict[str, str] = {}
        for e in self.of_type("trade_state"):
            states[e.ref] = e.detail["state"]
        return states

    def settled_trades(self) -> list[str]:
        return [t for t, s in self.trade_states().items() if s == "Settled"]

    def rejections(self) -> list[TraceEvent]:
        return self.of_type("reject", "abort")
