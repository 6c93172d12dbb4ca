"""
Scenario configuration and the deterministic epoch scheduler.

One epoch runs, in order: deliveries due this epoch, agent actions, broker
duties (matching, timeouts, outbound flush), scripted adversaries, then block
production and anchoring on every chain.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import crypto
from .agents import (
    AgentEnv,
    BrokerInfo,
    BuyerAgent,
    ReplayAttacker,
    SellerAgent,
    UserContract,
    synth_samples,
)
from .blobstore import BlobStore
from .broker import FINAL_STATES, BrokerConfig, BrokerContract, PriceTable
from .ca import CertificateAuthority, EnrollmentRequest
from .errors import ConfigParse, InvariantViolation, MarketError
from .ledger import ChainId, ChainKind, GasTariff, Ledger
from .protocol import DataDescription, SensorType
from .trace import TradeTrace

log = logging.getLogger(__name__)

SELLERS_CHAIN = "sellers"
BUYERS_CHAIN = "buyers"
BROKERS_CHAIN = "brokers"

FAULTS = ("silent_buyer", "wrong_key", "replay_sell", "stale_nonce", "inflated_invoice",
          "wrong_amount")
SELLER_FAULTS = ("wrong_key", "replay_sell", "stale_nonce")
BUYER_FAULTS = ("silent_buyer", "inflated_invoice", "wrong_amount")

_REGION_ALPHABET = np.array(list("0123456789abcdef"))


@dataclass
class FaultSpec:
    agent: str
    fault: str
    trade: int = 0


@dataclass
class ScenarioConfig:
    seed: int = 0
    n_sellers: int = 2
    n_buyers: int = 2
    prices: dict = field(default_factory=lambda: {t.value: p for t, p in
                                                  PriceTable().items()})
    sensor_types: Optional[list] = None
    padding: bool = True
    buckets: list = field(default_factory=lambda: list(crypto.DEFAULT_BUCKETS))
    batching: bool = True
    batch_threshold: int = 16
    batch_timeout: int = 8
    off_ledger_gas: int = 0
    on_ledger_gas: int = 1
    score_timeout: int = 5
    payment_timeout: int = 30
    delivery_timeout: int = 30
    seller_choice: bool = False
    broker_per_sensor_type: bool = False
    faults: list = field(default_factory=list)
    max_epochs: int = 200
    stop_when_quiescent: bool = True
    trades_per_agent: int = 1
    agent_delay_max: int = 0
    volume_range: list = field(default_factory=lambda: [100, 1000])
    region_len_range: list = field(default_factory=lambda: [3, 20])
    buyer_funds: int = 1_000_000
    contract_gas_funds: int = 1_000
    broker_gas_funds: int = 100_000
    cert_validity: int = 1_000
    n_issuers: int = 3
    blob_latency: int = 0
    attacks: list = field(default_factory=list)
    strict: bool = True

    def __post_init__(self):
        self.faults = [f if isinstance(f, FaultSpec) else FaultSpec(**f) for f in self.faults]
        self.validate()

    def validate(self) -> "ScenarioConfig":
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigParse(msg)

        for name in ("seed", "n_sellers", "n_buyers", "max_epochs", "trades_per_agent",
                     "agent_delay_max", "batch_threshold", "batch_timeout", "score_timeout",
                     "payment_timeout", "delivery_timeout", "off_ledger_gas", "on_ledger_gas"):
            v = getattr(self, name)
            need(isinstance(v, int) and not isinstance(v, bool), f"{name} must be an integer")
        need(self.n_sellers >= 0 and self.n_buyers >= 0, "agent counts must be >= 0")
        need(self.max_epochs > 0, "max_epochs must be > 0")
        need(self.off_ledger_gas >= 0 and self.on_ledger_gas >= 0, "gas must be >= 0")
        need(isinstance(self.prices, dict) and self.prices, "prices must be a non-empty map")
        for k, v in self.prices.items():
            need(k in SensorType._value2member_map_, f"unknown sensor type {k!r}")
            need(isinstance(v, int) and not isinstance(v, bool) and v > 0,
                 f"price for {k} must be a positive integer")
        for t in self.sensor_types or []:
            need(t in self.prices, f"sensor type {t!r} has no price")
        need(all(isinstance(b, int) and b > crypto.OVERHEAD for b in self.buckets),
             "buckets must be integers larger than the ciphertext overhead")
        lo, hi = self.volume_range
        need(0 < lo <= hi, "volume_range must satisfy 0 < lo <= hi")
        rlo, rhi = self.region_len_range
        need(0 < rlo <= rhi, "region_len_range must satisfy 0 < lo <= hi")
        for f in self.faults:
            need(f.fault in FAULTS, f"unknown fault {f.fault!r}")
        return self

    @property
    def active_buckets(self) -> Optional[list]:
        return sorted(self.buckets) if self.padding else None

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigParse(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigParse(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigParse(f"cannot read {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigParse("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


def _region_label(rng: np.random.Generator, lo: int, hi: int) -> str:
    n = int(rng.integers(lo, hi + 1))
    return "hx-" + "".join(rng.choice(_REGION_ALPHABET, size=n))


@dataclass
class SimulationResult:
    config: ScenarioConfig
    trace: TradeTrace
    ledger: Ledger
    sellers: list[SellerAgent]
    buyers: list[BuyerAgent]
    brokers: list[BrokerContract]
    blobstore: BlobStore
    ca: CertificateAuthority
    epochs: int
    quiescent: bool
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def trades(self):
        return [t for b in self.brokers for t in b.trades.values()]

    def settled(self):
        return [t for t in self.trades() if t.state.value == "Settled"]


class Simulation:
    def __init__(self, config: ScenarioConfig):
        self.config = cfg = config
        root = np.random.SeedSequence(cfg.seed)
        (s_keys, s_ca, s_broker, s_scenario, s_agents, s_adv) = root.spawn(6)
        self.rng_scenario = np.random.default_rng(s_scenario)
        self.trace = TradeTrace()
        buckets = cfg.active_buckets
        self.ledger = Ledger(GasTariff(cfg.off_ledger_gas, cfg.on_ledger_gas), self.trace,
                             ciphertext_lengths=buckets if cfg.strict else None)
        for cid in (ChainId(SELLERS_CHAIN), ChainId(BUYERS_CHAIN),
                    ChainId(BROKERS_CHAIN, ChainKind.CONSORTIUM)):
            self.ledger.add_chain(cid)
        self.blobstore = BlobStore(cfg.blob_latency)
        self.ca = CertificateAuthority(cfg.n_issuers, np.random.default_rng(s_ca))
        self.prices = PriceTable(cfg.prices)
        self.types = [SensorType(t) for t in (cfg.sensor_types or list(cfg.prices))]

        bcfg = BrokerConfig(buckets=buckets, batching=cfg.batching,
                            batch_threshold=cfg.batch_threshold, batch_timeout=cfg.batch_timeout,
                            score_timeout=cfg.score_timeout, payment_timeout=cfg.payment_timeout,
                            delivery_timeout=cfg.delivery_timeout, seller_choice=cfg.seller_choice)
        key_rng = np.random.default_rng(s_keys)
        broker_rng = np.random.default_rng(s_broker)
        self.brokers: list[BrokerContract] = []
        self._broker_for: dict[SensorType, BrokerContract] = {}
        groups = [[t] for t in self.types] if cfg.broker_per_sensor_type else [self.types]
        for i, group in enumerate(groups):
            broker = BrokerContract(crypto.keygen(key_rng), self.prices, self.ca.trusted_keys,
                                    bcfg, broker_rng,
                                    sensor_types=group if cfg.broker_per_sensor_type else None)
            self.ledger.deploy(BROKERS_CHAIN, broker, f"broker{i}")
            self.ledger.mint(broker.address, cfg.broker_gas_funds)
            self.brokers.append(broker)
            for t in group:
                self._broker_for[t] = broker

        self.env = AgentEnv(self.ledger, self.blobstore, self.prices, self.broker_info, buckets)
        self.sellers: list[SellerAgent] = []
        self.buyers: list[BuyerAgent] = []
        self._build_agents(np.random.default_rng(s_agents))
        self.adversary_rng = np.random.default_rng(s_adv)
        self.attacker: Optional[ReplayAttacker] = None
        self._replays_done: set[tuple[str, int]] = set()
        self._replay_targets = [(f.agent, f.trade) for f in cfg.faults if f.fault == "replay_sell"]
        if self._replay_targets:
            self.attacker = ReplayAttacker()
            self.ledger.deploy(SELLERS_CHAIN, self.attacker, "attacker")
            self.ledger.mint(self.attacker.address, cfg.contract_gas_funds)
        self.epoch = 0

    def broker_info(self, sensor_type: SensorType) -> BrokerInfo:
        b = self._broker_for[SensorType(sensor_type)]
        return BrokerInfo(b.address, b.public_key)

    # -- scenario --------------------------------------------------------------
    def _plan(self) -> tuple[list[list[DataDescription]], list[list[DataDescription]]]:
        cfg, rng = self.config, self.rng_scenario
        vlo, vhi = cfg.volume_range
        rlo, rhi = cfg.region_len_range
        seller_plans, buyer_plans = [], []
        for i in range(max(cfg.n_sellers, cfg.n_buyers)):
            t = self.types[int(rng.integers(len(self.types)))]
            region = _region_label(rng, rlo, rhi)
            s_plan, b_plan = [], []
            for _ in range(cfg.trades_per_agent):
                volume = int(rng.integers(vlo, vhi + 1))
                s_plan.append(DataDescription(t, region, volume, (0, 10_000)))
                b_plan.append(DataDescription(t, region, volume, (0, 10_000)))
            if i < cfg.n_sellers:
                seller_plans.append(s_plan)
            if i < cfg.n_buyers:
                buyer_plans.append(b_plan)
        return seller_plans, buyer_plans

    def _faults_for(self, agent: str) -> dict[int, str]:
        return {f.trade: f.fault for f in self.config.faults if f.agent == agent}

    def _build_agents(self, rng: np.random.Generator) -> None:
        cfg = self.config
        seller_plans, buyer_plans = self._plan()
        agent_seeds = rng.spawn(len(seller_plans) + len(buyer_plans))
        for i, plan in enumerate(seller_plans):
            name = f"seller{i}"
            arng = agent_seeds[i]
            t = plan[0].sensor_type
            enroll = EnrollmentRequest(plan[0].region, t,
                                       tuple(synth_samples(t, 8, arng).tolist()),
                                       crypto.new_nonce(arng))
            cert = self.ca.issue_certificate(enroll, now=0, validity=cfg.cert_validity)
            agent = SellerAgent(name, self.env, arng, cert, cfg.agent_delay_max, plan,
                                self._faults_for(name))
            self._attach(agent, SELLERS_CHAIN, cfg.contract_gas_funds)
            self.sellers.append(agent)
        for j, plan in enumerate(buyer_plans):
            name = f"buyer{j}"
            agent = BuyerAgent(name, self.env, agent_seeds[len(seller_plans) + j],
                               cfg.agent_delay_max, plan, self._faults_for(name))
            self._attach(agent, BUYERS_CHAIN, cfg.buyer_funds)
            self.buyers.append(agent)
        # broker-side fault hooks
        for f in cfg.faults:
            if f.fault == "inflated_invoice":
                for b in self.brokers:
                    b.inflate_invoice_refs.add(f"B{f.agent.removeprefix('buyer')}.{f.trade}")
            elif f.fault == "stale_nonce":
                seller = self._agent(f.agent)
                ref = f"S{f.agent.removeprefix('seller')}.{f.trade}"
                for b in self.brokers:
                    b.stale_nonce_for[ref] = self._stale_source(seller)

    def _stale_source(self, seller: SellerAgent):
        def source() -> crypto.Nonce:
            if seller.past_nonces:
                return seller.past_nonces[-1]
            return crypto.new_nonce(self.adversary_rng)
        return source

    def _agent(self, name: str):
        for a in self.sellers + self.buyers:
            if a.name == name:
                return a
        raise ConfigParse(f"fault names unknown agent {name!r}")

    def _attach(self, agent, chain: str, funds: int) -> None:
        contract = UserContract(agent.wallet)
        contract.owner = agent
        self.ledger.deploy(chain, contract, agent.name)
        self.ledger.mint(contract.address, funds)
        # the wallet's own L2 deposit pays any off-ledger tariff
        self.ledger.mint(agent.wallet, self.config.contract_gas_funds)
        agent.contract = contract

    # -- running ------------------------------------------------------------------
    def _run_adversary(self, now: int) -> None:
        if self.attacker is None:
            return
        for name, trade in self._replay_targets:
            if (name, trade) in self._replays_done:
                continue
            seller = self._agent(name)
            prefix = f"{seller.contract.address}/out/".encode()
            captured = [v for blk in self.ledger.blocks(SELLERS_CHAIN)
                        for k, v in blk.mutations if k.startswith(prefix) and b"/sell/" in k]
            if len(captured) > trade:
                self._replays_done.add((name, trade))
                broker = seller.broker.address
                self.attacker.replay(self.ledger, broker, "sell", captured[trade],
                                     ref=f"replay:{seller.ref}")

    def step(self) -> None:
        now = self.epoch
        self.ledger.epoch = now
        self.ledger.deliver_due(now)
        for agent in self.sellers + self.buyers:
            agent.tick(now)
        for broker in self.brokers:
            broker.tick(self.ledger, now)
        self._run_adversary(now)
        for chain in (SELLERS_CHAIN, BUYERS_CHAIN, BROKERS_CHAIN):
            self.ledger.produce_block(chain, now)
            self.ledger.anchor_chain(chain, now)
        if self.config.strict:
            self.ledger.check_conservation()
        self.epoch += 1

    def quiescent(self) -> bool:
        if self.ledger.pending_deliveries():
            return False
        if any(a.busy for a in self.sellers + self.buyers):
            return False
        for b in self.brokers:
            if b.outbox_size or b.open_trades():
                return False
        if self._replay_targets and len(self._replays_done) < len(self._replay_targets):
            return False
        return True

    def run(self) -> SimulationResult:
        cfg = self.config
        quiet = False
        while self.epoch < cfg.max_epochs:
            self.step()
            if cfg.stop_when_quiescent and self.quiescent():
                quiet = True
                break
        quiet = quiet or self.quiescent()
        self.trace.emit(self.epoch - 1, "run_end", detail={"epochs": self.epoch,
                                                           "quiescent": quiet})
        result = SimulationResult(cfg, self.trace, self.ledger, self.sellers, self.buyers,
                                  self.brokers, self.blobstore, self.ca, self.epoch, quiet)
        result.violations = check_invariants(result)
        return result


def check_invariants(result: SimulationResult) -> list[str]:
    """Names of every end-of-run invariant that does not hold."""
    bad = []
    ledger = result.ledger
    try:
        ledger.check_conservation()
    except InvariantViolation:
        bad.append("token_conservation")
    if ledger.l1_tx_count != result.trace.l1_tx_count:
        bad.append("l1_tx_count")
    if ledger.l1_tx_count != ledger.n_on_ledger + ledger.n_transfers + ledger.n_anchors:
        bad.append("l1_tx_count")
    if result.quiescent:
        if any(t.state not in FINAL_STATES for t in result.trades()):
            bad.append("trade_liveness")
        if any(b.escrow_total for b in result.brokers):
            bad.append("escrow_drained")
    else:
        bad.append("quiescence")
    buckets = result.config.active_buckets
    if buckets:
        lens = [len(v) for chain in (SELLERS_CHAIN, BUYERS_CHAIN)
                for blk in ledger.blocks(chain)
                for (k, v), tag in zip(blk.mutations, blk.tags) if tag == "ciphertext"]
        if not crypto.all_in_buckets(lens, buckets):
            bad.append("bucket_lengths")
    for chain in (SELLERS_CHAIN, BUYERS_CHAIN):
        for blk in ledger.blocks(chain):
            if any(tag not in ("ciphertext", "bookkeeping") for tag in blk.tags):
                bad.append("block_opacity")
                break
    return bad


def run_scenario(config: ScenarioConfig | dict | str | Path, **overrides: Any) -> SimulationResult:
    if isinstance(config, (str, Path)):
        config = ScenarioConfig.load(config)
    elif isinstance(config, dict):
        config = ScenarioConfig.from_dict(config)
    if overrides:
        d = config.to_dict()
        d.update(overrides)
        config = ScenarioConfig.from_dict(d)
    return Simulation(config).run()
