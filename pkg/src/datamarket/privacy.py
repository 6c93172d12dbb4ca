"""
Adversary harness: what an outside or inside observer sees, and two linkage
attacks that try to pair each buyer with the seller they traded with.

The observer may read every block of the sellers' and buyers' chains (it can
run a validator there), every anchor transaction, and the timing, chain pair
and size of every L1 transaction.  It never sees brokers'-chain mutations and
is never handed any broker key material: nothing in this module can reach it.

A block mutation key has the form ``<contract>/<in|out>/<n>/<entry>/<part>``,
so the observer knows which contract was active in which epoch and in which
direction, but every value is ciphertext.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .errors import UnknownAttack
from .ledger import AnchorTx, ChainBlock
from .trace import TradeTrace

log = logging.getLogger(__name__)

PUBLIC_CHAINS = ("sellers", "buyers")
ROLES = ("external", "insider_seller", "insider_buyer")
# contract write -> broker -> counterpart contract write, with immediate relay
RELAY_LAG = 2

LinkageGuess = dict  # buyer contract -> seller contract


@dataclass
class ObserverView:
    seller_chain_blocks: list[ChainBlock]
    buyer_chain_blocks: list[ChainBlock]
    anchor_txs: list[AnchorTx]
    l1_tx_timings: list[tuple[int, tuple[str, str], int]]
    role: str = "external"
    insider_knowledge: list[dict] = field(default_factory=list)
    insider_contract: Optional[str] = None


@dataclass(frozen=True)
class ContractEvent:
    epoch: int
    contract: str
    direction: str  # "in" | "out"
    seq: int
    entry: str
    length: int


def _block_from_event(detail: dict, epoch: int) -> ChainBlock:
    muts = [(bytes.fromhex(k), bytes.fromhex(v)) for k, v in detail["mutations"]]
    return ChainBlock(detail["height"], epoch, muts, list(detail.get("tags", [])))


def build_observer_view(trace: TradeTrace, role: str = "external", insider=None) -> ObserverView:
    """Assemble the observer's view from the public parts of a trace.

    For insider roles pass the insider's agent object; its own decrypted
    knowledge (e.g. the buyer key and nonce a seller learns) is attached.
    """
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    sellers, buyers, anchors, timings = [], [], [], []
    for e in trace.events:
        if e.event_type == "block" and e.chain in PUBLIC_CHAINS:
            blk = _block_from_event(e.detail, e.epoch)
            (sellers if e.chain == "sellers" else buyers).append(blk)
        elif e.event_type == "anchor":
            anchors.append(AnchorTx(e.chain, bytes.fromhex(e.detail["commitment"]), e.epoch))
        elif e.event_type in ("on_ledger", "transfer"):
            timings.append((e.epoch, (e.chain, e.dst_chain), e.payload_len))
    view = ObserverView(sellers, buyers, anchors, timings, role)
    if role != "external":
        if insider is None:
            raise ValueError("insider roles need the insider agent")
        expected = "seller" if role == "insider_seller" else "buyer"
        if insider.kind != expected:
            raise ValueError(f"{role} needs a {expected} agent")
        view.insider_knowledge = [dict(k) for k in insider.knowledge]
        view.insider_contract = insider.contract.address
    return view


def contract_events(blocks: list[ChainBlock]) -> list[ContractEvent]:
    out = []
    for blk in blocks:
        for key, value in blk.mutations:
            parts = key.decode(errors="replace").split("/")
            if len(parts) != 5 or parts[1] not in ("in", "out") or parts[4] != "0":
                continue
            out.append(ContractEvent(blk.epoch, parts[0], parts[1], int(parts[2]), parts[3],
                                     len(value)))
    return out


def _by_contract(events: list[ContractEvent], direction: str) -> dict[str, list[ContractEvent]]:
    d: dict[str, list[ContractEvent]] = {}
    for ev in events:
        if ev.direction == direction:
            d.setdefault(ev.contract, []).append(ev)
    for evs in d.values():
        evs.sort(key=lambda ev: (ev.epoch, ev.seq))
    return d


def _parties(view: ObserverView) -> tuple[list[ContractEvent], list[ContractEvent], list, list]:
    s_ev = contract_events(view.seller_chain_blocks)
    b_ev = contract_events(view.buyer_chain_blocks)
    sellers = sorted({e.contract for e in s_ev})
    buyers = sorted({e.contract for e in b_ev})
    return s_ev, b_ev, sellers, buyers


def _greedy_assign(score: np.ndarray, buyers: list, sellers: list,
                   rng: np.random.Generator) -> LinkageGuess:
    """Highest-score pairs first; exact ties are broken uniformly at random."""
    nb, ns = score.shape
    if nb == 0 or ns == 0:
        return {}
    noise = rng.random(score.shape)
    order = np.lexsort((noise.ravel(), -score.ravel()))
    guess, used_b, used_s = {}, set(), set()
    for flat in order:
        i, j = divmod(int(flat), ns)
        if i in used_b or j in used_s:
            continue
        guess[buyers[i]] = sellers[j]
        used_b.add(i)
        used_s.add(j)
    return guess


def timing_attack(view: ObserverView, rng=None, lag: int = RELAY_LAG) -> LinkageGuess:
    """Link buyers to sellers by cross-chain activity that lines up across the broker.

    A pair scores one point for every seller write followed by a buyer receipt
    exactly ``lag`` epochs later, and for every buyer write followed by a
    seller receipt ``lag`` epochs later.
    """
    rng = np.random.default_rng(rng)
    s_ev, b_ev, sellers, buyers = _parties(view)
    s_out, s_in = _by_contract(s_ev, "out"), _by_contract(s_ev, "in")
    b_out, b_in = _by_contract(b_ev, "out"), _by_contract(b_ev, "in")
    score = np.zeros((len(buyers), len(sellers)))
    for i, b in enumerate(buyers):
        bi = np.array([e.epoch for e in b_in.get(b, [])])
        bo = np.array([e.epoch for e in b_out.get(b, [])])
        for j, s in enumerate(sellers):
            so = np.array([e.epoch for e in s_out.get(s, [])])
            si = np.array([e.epoch for e in s_in.get(s, [])])
            n = 0
            if bi.size and so.size:
                n += int(np.sum(bi[:, None] - so[None, :] == lag))
            if si.size and bo.size:
                n += int(np.sum(si[:, None] - bo[None, :] == lag))
            score[i, j] = n
    return _greedy_assign(score, buyers, sellers, rng)


def size_attack(view: ObserverView, rng=None) -> LinkageGuess:
    """Link buyers to sellers by the sizes of their opening requests.

    Sell and buy requests both embed the traded data description, so their
    lengths grow together; the attack pairs the k-th shortest sell request with
    the k-th shortest buy request (ties in random order).
    """
    rng = np.random.default_rng(rng)
    s_ev, b_ev, sellers, buyers = _parties(view)

    def opening_len(evs: dict[str, list[ContractEvent]], who: str) -> float:
        first = evs.get(who)
        return float(first[0].length) if first else -1.0

    s_out, b_out = _by_contract(s_ev, "out"), _by_contract(b_ev, "out")
    s_len = np.array([opening_len(s_out, s) for s in sellers])
    b_len = np.array([opening_len(b_out, b) for b in buyers])
    s_rank = np.lexsort((rng.random(len(sellers)), s_len))
    b_rank = np.lexsort((rng.random(len(buyers)), b_len))
    return {buyers[i]: sellers[j] for i, j in zip(b_rank, s_rank)}


ATTACKS: dict[str, Callable[..., LinkageGuess]] = {
    "timing": timing_attack,
    "size": size_attack,
}


def get_attack(name: str) -> Callable[..., LinkageGuess]:
    try:
        return ATTACKS[name]
    except KeyError:
        raise UnknownAttack(f"unknown attack {name!r}; choose from {sorted(ATTACKS)}") from None


def ground_truth(trace: TradeTrace) -> LinkageGuess:
    return {m["buyer_contract"]: m["seller_contract"] for m in trace.matches().values()}


def linkage_accuracy(guess: LinkageGuess, truth: LinkageGuess) -> float:
    """Fraction of true trades the guess links correctly."""
    if not truth:
        return 0.0
    return sum(1 for b, s in truth.items() if guess.get(b) == s) / len(truth)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

@dataclass
class AttackReport:
    attack: str
    n_trades: int
    n_runs: int
    mean_accuracy: float
    ci95_low: float
    ci95_high: float
    mitigations: dict
    warning: Optional[str] = None
    accuracies: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("accuracies")
        if d["warning"] is None:
            d.pop("warning")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def clopper_pearson(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    a = 1 - level
    lo = 0.0 if k == 0 else float(stats.beta.ppf(a / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - a / 2, k + 1, n - k))
    return lo, hi


def chance_interval(n_trades: int, n_runs: int, level: float = 0.95) -> tuple[float, float]:
    """Central binomial interval for pooled accuracy when guessing at chance (1/N)."""
    n = n_trades * n_runs
    p = 1.0 / n_trades
    a = 1 - level
    return float(stats.binom.ppf(a / 2, n, p)) / n, float(stats.binom.ppf(1 - a / 2, n, p)) / n


def make_report(attack: str, n_trades: int, accuracies: list[float],
                mitigations: dict) -> AttackReport:
    n_runs = len(accuracies)
    k = int(round(sum(a * n_trades for a in accuracies)))
    lo, hi = clopper_pearson(k, n_trades * n_runs)
    warning = "degenerate interval: fewer than 2 runs" if n_runs < 2 else None
    mean = float(np.mean(accuracies)) if accuracies else 0.0
    return AttackReport(attack, n_trades, n_runs, mean, lo, hi, dict(mitigations), warning,
                        list(accuracies))


def linkage_scenario(n_trades: int, seed: int, padding: bool, batching: bool,
                     **overrides) -> dict:
    """Scenario used for linkage experiments: N concurrent one-shot trades."""
    cfg = dict(seed=seed, n_sellers=n_trades, n_buyers=n_trades, padding=padding,
               batching=batching, batch_threshold=n_trades, batch_timeout=8,
               agent_delay_max=5, max_epochs=400)
    cfg.update(overrides)
    return cfg


def monte_carlo(base_config: dict, attacks=("timing", "size"), n_runs: int = 200,
                base_seed: int = 0) -> dict[str, AttackReport]:
    """Run every attack on ``n_runs`` markets that differ only in their seed."""
    from .sim import run_scenario

    fns = {name: get_attack(name) for name in attacks}
    acc: dict[str, list[float]] = {name: [] for name in attacks}
    n_trades = 0
    for r in range(n_runs):
        seed = base_seed + r
        res = run_scenario(dict(base_config, seed=seed))
        view = build_observer_view(res.trace)
        truth = ground_truth(res.trace)
        n_trades = max(n_trades, len(truth))
        for name, fn in fns.items():
            acc[name].append(linkage_accuracy(fn(view, rng=[seed, 7919]), truth))
    mitigations = {"padding": bool(base_config.get("padding", True)),
                   "batching": bool(base_config.get("batching", True))}
    return {name: make_report(name, max(n_trades, 1), acc[name], mitigations)
            for name in attacks}


def run_linkage_experiment(
    attacks=("timing", "size"),
    n_trades: int = 16,
    n_runs: int = 200,
    padding: bool = True,
    batching: bool = True,
    base_seed: int = 0,
    **overrides,
) -> dict[str, AttackReport]:
    cfg = linkage_scenario(n_trades, base_seed, padding, batching, **overrides)
    return monte_carlo(cfg, attacks, n_runs, base_seed)


def attack_trace(trace: TradeTrace, attack: str, seed: int = 0,
                 mitigations: Optional[dict] = None) -> AttackReport:
    """Single-trace attack (one run): degenerate confidence interval."""
    fn = get_attack(attack)
    truth = ground_truth(trace)
    acc = linkage_accuracy(fn(build_observer_view(trace), rng=seed), truth)
    return make_report(attack, max(len(truth), 1), [acc], mitigations or {})


# ---------------------------------------------------------------------------
# Plaintext containment
# ---------------------------------------------------------------------------

def _secret_forms(secret: bytes) -> list[bytes]:
    import base64
    return [secret, secret.hex().encode(), base64.b64encode(secret)]


def plaintext_leaks(result, window: int = 32) -> list[str]:
    """Scan every artifact a run leaves behind for protocol secrets.

    Secrets are each seller's raw sensor bytes, every symmetric data key and
    each data description in plaintext (its region label and JSON form).
    Artifacts are all chain blocks (brokers' chain included), anchors, the
    blob store and the serialized trace.  Secrets are searched raw, hex and
    base64 encoded; sensor data is probed with its first ``window`` bytes.
    Returns one description per hit; an empty list means nothing leaked.
    """
    secrets: list[tuple[str, bytes]] = []
    for s in result.sellers:
        for i, raw in enumerate(s.raw_data_history):
            secrets.append((f"{s.name} raw data {i}", raw[:window]))
        for i, k in enumerate(s.sym_key_history):
            secrets.append((f"{s.name} data key {i}", k))
    for agent in result.sellers + result.buyers:
        plan_dds = [agent.dd] if agent.dd is not None else []
        for dd in plan_dds:
            secrets.append((f"{agent.name} region", dd.region.encode()))
            secrets.append((f"{agent.name} dd json",
                            json.dumps(dd.to_dict(), sort_keys=True,
                                       separators=(",", ":")).encode()))

    haystacks: list[tuple[str, bytes]] = []
    for chain in result.ledger.chains:
        for blk in result.ledger.blocks(chain):
            for k, v in blk.mutations:
                haystacks.append((f"{chain} block {blk.height}", k + b"\x00" + v))
    haystacks.append(("trace", result.trace.to_jsonl().encode()))
    for i, blob in enumerate(result.blobstore.blobs()):
        haystacks.append((f"blob {i}", blob))

    leaks = []
    for label, secret in secrets:
        if not secret:
            continue
        forms = _secret_forms(secret)
        for where, hay in haystacks:
            if any(f in hay for f in forms):
                leaks.append(f"{label} found in {where}")
    return leaks
