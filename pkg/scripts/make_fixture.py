#!/usr/bin/env python3
"""Write the survey-shaped demo fixture plus a ready-to-run estimate config.

The fixture mimics a food-pantry visit survey: 2228 respondents over five
demographic factors (288 poststratification cells), a binary visit
indicator as X, and known-margin counts for every cell.  After writing,
try:

    emrp estimate <out>/estimate.cfg --method wfpbb-mrp --out estimates.json
"""

import argparse
import os
import sys

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(REPO, "src"))

from emrp.fixtures import FixtureSpec, write_fixture

CONFIG = """\
sample = {sample}
margins = {margins}
z_factors = age:3, sex:2, race:3, educ:4, income:4
model_terms = age, sex, race, educ, income, x, x:income
l = 500
f = 10
t = 5
centered = true
traj_time = 2.4
subgroup visitor = x == 2
subgroup poor_nonvisitor = x == 1 & income in {{1, 2}}
"""


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default=os.path.join(REPO, "fixture"))
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()

    spec = FixtureSpec() if args.seed is None else FixtureSpec(seed=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    paths = write_fixture(args.out_dir, spec)
    cfg_path = os.path.join(args.out_dir, "estimate.cfg")
    with open(cfg_path, "w", encoding="utf-8") as fh:
        fh.write(CONFIG.format(sample=paths["sample"], margins=paths["margins"]))
    print(f"sample:  {paths['sample']}")
    print(f"margins: {paths['margins']}")
    print(f"config:  {cfg_path}")


if __name__ == "__main__":
    sys.exit(main())
