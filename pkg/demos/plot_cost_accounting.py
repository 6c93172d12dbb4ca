"""
What a trade costs
==================

Count the L1 transactions and off-ledger requests each settled trade needs,
compare them against the tariff, and see how throughput scales with the
number of agents.
"""

# %%
# Eight sellers and eight buyers, default tariff: off-ledger requests are free
# and every L1 transaction costs one unit of gas.
import numpy as np

from datamarket import ScenarioConfig, run_scenario
from datamarket.metrics import HAPPY_PATH_L1_TXS, HAPPY_PATH_OFF_LEDGER, cost_report

result = run_scenario(ScenarioConfig(seed=5, n_sellers=8, n_buyers=8))
report = cost_report(result.trace)
l1 = np.array([t.l1_tx_count for t in report.trades])
off = np.array([t.off_ledger_count for t in report.trades])
ratio = np.array([t.gas_to_price_ratio for t in report.trades])
print(f"{len(report.trades)} trades settled")
print("L1 txs per trade:", np.unique(l1), "expected", HAPPY_PATH_L1_TXS)
print("off-ledger per trade:", np.unique(off), "expected", HAPPY_PATH_OFF_LEDGER)
print(f"gas/price: mean {ratio.mean():.4f}, max {ratio.max():.4f}")

# %%
# Charging for off-ledger requests too.  Each trade now pays 9 units for its
# L1 hops plus 2 for each of its 5 wallet calls.
priced = run_scenario(ScenarioConfig(seed=5, n_sellers=8, n_buyers=8, off_ledger_gas=2))
gas = {t.gas_total for t in cost_report(priced.trace).trades}
print("gas per trade with a 2-unit off-ledger tariff:", gas)

# %%
# A buyer who never scores: the broker settles on its own after the score
# timeout, and the trade needs one L1 transaction fewer.
silent = run_scenario(ScenarioConfig(seed=3, n_sellers=1, n_buyers=1,
                                     faults=[{"agent": "buyer0", "fault": "silent_buyer"}]))
print("silent buyer:", [t.l1_tx_count for t in cost_report(silent.trace).trades])

# %%
# Throughput under sustained load, where each agent keeps trading.  Without
# the mix, doubling the number of pairs doubles the settled trades per epoch.
# With the mix, small markets wait for the batch timeout at every broker hop;
# once there is enough traffic to fill a batch of 16, the two curves meet.
def trades_per_epoch(pairs, batching):
    cfg = ScenarioConfig(seed=7, n_sellers=pairs, n_buyers=pairs, trades_per_agent=1000,
                         max_epochs=200, stop_when_quiescent=False, batching=batching)
    return cost_report(run_scenario(cfg).trace).aggregate["trades_per_epoch"]


print("pairs  no mix   mix")
for pairs in (4, 8, 16, 32):
    print(f"{pairs:5d}  {trades_per_epoch(pairs, False):6.3f} {trades_per_epoch(pairs, True):6.3f}")
