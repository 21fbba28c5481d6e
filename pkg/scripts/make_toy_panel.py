"""Write a small synthetic monthly panel with the same layout as the
replication panel (unemployment levels by group, a price index, two
inflation instruments and a policy-rate control).

    python3 scripts/make_toy_panel.py tests/fixtures/toy_panel.csv
"""

import argparse
from pathlib import Path

import numpy as np
import pandas as pd


def toy_panel(start="1975-01", months=420, seed=7) -> pd.DataFrame:
    rng = np.random.default_rng(seed)
    supply = np.zeros(months)
    demand = np.zeros(months)
    for t in range(1, months):
        supply[t] = 0.9 * supply[t - 1] + rng.normal(0, 0.5)
        demand[t] = 0.9 * demand[t - 1] + rng.normal(0, 0.5)
    shock = rng.normal(0, 0.3, months)
    inflation = 3.0 + supply + 0.6 * demand + shock
    ffr = 4.0 + 0.8 * inflation + rng.normal(0, 0.5, months)

    # monthly inflation rates compound into a price index
    pce = 100 * np.cumprod(1 + inflation / 1200)
    base = np.zeros(months)
    for t in range(1, months):
        base[t] = 0.95 * base[t - 1] + 0.02 * (inflation[t - 1] - 3) + 0.2 * shock[t - 1] \
            + rng.normal(0, 0.1) * (1 + 0.3 * max(inflation[t - 1] - 3, 0))
    ur_white = np.clip(5.0 + base, 2.0, None)
    ur_black = np.clip(10.0 + 1.9 * base + rng.normal(0, 0.3, months), 4.0, None)

    dates = pd.period_range(start, periods=months, freq="M").strftime("%Y-%m")
    df = pd.DataFrame({"date": dates, "UR_WHITE": ur_white, "UR_BLACK": ur_black,
                       "PCEPI": pce, "SUPPLY": supply, "DEMAND": demand, "FFR": ffr})
    # instruments start later than the outcomes, as in the real data
    df.loc[:23, ["SUPPLY", "DEMAND"]] = np.nan
    return df.round(6)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--months", type=int, default=420)
    args = ap.parse_args()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    toy_panel(months=args.months, seed=args.seed).to_csv(args.out, index=False)
    print(args.out)


if __name__ == "__main__":
    main()
