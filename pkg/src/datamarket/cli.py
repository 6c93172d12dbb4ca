"""Command-line scenario runner: ``datamarket run | attack | report``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import privacy
from .errors import ConfigParse, InvariantViolation, MarketError, UnknownAttack
from .metrics import cost_report
from .sim import ScenarioConfig, run_scenario
from .trace import TradeTrace

log = logging.getLogger("datamarket")

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_CONFIG = 2
EXIT_USAGE = 3


def _load_config(path: str | None, seed: int | None) -> ScenarioConfig:
    cfg = ScenarioConfig.load(path) if path else ScenarioConfig()
    if seed is not None:
        d = cfg.to_dict()
        d["seed"] = seed
        cfg = ScenarioConfig.from_dict(d)
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def cmd_run(args) -> int:
    cfg = _load_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_scenario(cfg)
    result.trace.write(out / "trace.jsonl")
    (out / "cost_report.json").write_text(cost_report(result.trace).to_json() + "\n",
                                          encoding="utf-8")
    _write_json(out / "reputation.json",
                {b.address: b.reputation.to_json() for b in result.brokers})
    if cfg.attacks:
        reports = [privacy.attack_trace(result.trace, name, seed=cfg.seed, mitigations={
                       "padding": cfg.padding, "batching": cfg.batching}).to_dict()
                   for name in cfg.attacks]
        _write_json(out / "privacy_report.json", reports)
    settled = len(result.settled())
    log.info("ran %d epochs, %d trades settled", result.epochs, settled)
    if result.violations:
        raise InvariantViolation(result.violations[0], f"all violations: {result.violations}")
    print(f"{settled} trades settled in {result.epochs} epochs; artifacts in {out}")
    return EXIT_OK


def cmd_attack(args) -> int:
    name = args.attack
    privacy.get_attack(name)
    if args.trace:
        report = privacy.attack_trace(TradeTrace.read(args.trace), name,
                                      seed=args.seed or 0)
    else:
        cfg = _load_config(args.config, None).to_dict()
        base = cfg.pop("seed") if args.seed is None else args.seed
        report = privacy.monte_carlo(cfg, (name,), args.runs, base)[name]
    text = report.to_json()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"attack_{name}.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_report(args) -> int:
    trace = TradeTrace.read(args.trace)
    rep = cost_report(trace)
    print(f"{'trade':34} {'L1 txs':>6} {'off-ledger':>10} {'gas':>5} {'price':>7} {'gas/price':>9}")
    for t in rep.trades:
        print(f"{t.trade_id:34} {t.l1_tx_count:>6} {t.off_ledger_count:>10} {t.gas_total:>5} "
              f"{t.price:>7} {t.gas_to_price_ratio:>9.5f}")
    agg = rep.aggregate
    print(f"{agg['trades']} settled trades over {agg['epochs']} epochs "
          f"({agg['trades_per_epoch']:.3f}/epoch); {agg['l1_tx_total']} L1 txs, "
          f"{agg['gas_total']} gas")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="datamarket", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a scenario and write artifacts")
    run.add_argument("--config", help="scenario JSON file (defaults if omitted)")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--out", default="out", help="output directory")
    run.set_defaults(func=cmd_run)

    atk = sub.add_parser("attack", help="run a linkage attack")
    atk.add_argument("--attack", required=True, help="attack name: " + ", ".join(privacy.ATTACKS))
    atk.add_argument("--trace", help="attack one recorded trace instead of simulating")
    atk.add_argument("--config", help="base scenario for the Monte Carlo")
    atk.add_argument("--seed", type=int, help="first seed of the Monte Carlo")
    atk.add_argument("--runs", type=int, default=200)
    atk.add_argument("--out", help="directory for the report file")
    atk.set_defaults(func=cmd_attack)

    rep = sub.add_parser("report", help="print a trace's cost summary")
    rep.add_argument("trace")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MARKET_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except ConfigParse as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UnknownAttack, MarketError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
