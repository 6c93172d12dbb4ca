"""
Misbehaving parties
===================

Inject one fault at a time into a two-by-two market and watch which check
catches it, what happens to the trade, and whether the money adds up.
"""

# %%
# Each fault is attached to a named agent.  Seller faults: replaying an old
# sell request, answering a notice for a trade it never opened, handing the
# buyer the wrong data key.  Buyer faults: never scoring, receiving an
# overpriced invoice, paying the wrong amount.
from collections import Counter

from datamarket import ScenarioConfig, run_scenario
from datamarket.sim import BUYER_FAULTS, SELLER_FAULTS

# %%
# For every fault: the errors raised, the final state of each trade, and the
# invariant check on token conservation.
for fault in SELLER_FAULTS + BUYER_FAULTS:
    agent = "seller0" if fault in SELLER_FAULTS else "buyer0"
    result = run_scenario(ScenarioConfig(seed=11, faults=[{"agent": agent, "fault": fault}]))
    errors = sorted({ev.detail["error"] for ev in result.trace.rejections()})
    states = Counter(result.trace.trade_states().values())
    print(f"{fault:17s} errors {errors or 'none'}; trades {dict(states)}; "
          f"invariants ok: {result.ok}")

# %%
# The reputation table records what buyers thought of their data.  A seller
# who sends the wrong key gets a zero from its buyer.
result = run_scenario(ScenarioConfig(seed=11, faults=[{"agent": "seller0", "fault": "wrong_key"}]))
for row in result.brokers[0].reputation.to_json():
    print(row["seller_contract_id"][:12], row["score_count"], row["mean"])
