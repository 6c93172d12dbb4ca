"""
One trade, end to end
=====================

A single seller and a single buyer meet through the broker.  We follow the
trade through every state, look at what lands on the L1 ledger and check that
the payment went where it should.
"""

# %%
# Run a one-seller, one-buyer scenario.  Batching is switched off so the
# broker forwards messages as soon as they are ready.
from datamarket import ScenarioConfig, run_scenario

cfg = ScenarioConfig(seed=1, n_sellers=1, n_buyers=1, batching=False)
result = run_scenario(cfg)
print(result.epochs, "epochs, invariants ok:", result.ok)

# %%
# The broker's view of the trade: one row per state change.
trace = result.trace
for ev in trace.of_type("trade_state"):
    print(f"epoch {ev.epoch:3d}  {ev.detail['state']}")

# %%
# Every L1 hop that carries the trade, with its payload size.  With padding
# on, each ciphertext is a bucket size.  The seller's delivery forward is the
# odd one out: it carries the routing tag and the delivery side by side, and
# the broker strips the tag before relaying.
match = next(iter(trace.matches().values()))
refs = {match["sell_ref"], match["buy_ref"], *trace.matches()}
for ev in trace.of_type("on_ledger", "transfer"):
    if ev.ref in refs:
        print(f"epoch {ev.epoch:3d}  {ev.event_type:9s} {ev.chain:>8s} -> {ev.dst_chain:8s} "
              f"{ev.payload_len:5d} bytes  amount={ev.amount}")

# %%
# The seller's contract started with its gas deposit and now also holds the
# price, less the gas it spent forwarding.  Supply is unchanged: everything
# minted at setup sits in an account or in the gas sink.
ledger = result.ledger
seller = result.sellers[0]
print("price:", match["price"])
print("seller contract balance:", ledger.balance(seller.contract.address))
print("supply", ledger.total_supply(), "minted", ledger.minted, "burned as gas", ledger.gas_sink)
print("reputation:", result.brokers[0].reputation.to_json())
