"""
Choosing between three training-data flavors for one structure.

Each flavor comes with per-case Dice and HD95 scores. The ranking tests
normality and variance, picks a parametric or rank-based route, awards
points for significant pairwise wins and falls back to HD95 when Dice
cannot separate the leaders. Every decision is kept in a trail.

Run: python3 demos/02_flavor_ranking.py
"""

import numpy as np

from labelcurate.rank import FlavorSamples, FlavorScoreSet, rank_flavors

rng = np.random.default_rng(3)


def samples(dice_mean, hd95_mean, n=20):
    dice = np.clip(rng.normal(dice_mean, 0.02, n), 0, 1)
    hd95 = np.abs(rng.normal(hd95_mean, 1.0, n))
    return FlavorSamples(dice_id=tuple(dice), hd95_id=tuple(hd95))


def with_dice(s, dice):
    return FlavorSamples(dice_id=dice, hd95_id=s.hd95_id)


# identical Dice samples leave all three flavors level after the Dice stage
shared = samples(0.85, 0).dice_id
cases = {
    "clear Dice winner": {"GT": samples(0.80, 6), "Pseudo": samples(0.86, 6), "Shape": samples(0.83, 6)},
    "Dice tie, HD95 decides": {f: with_dice(samples(0.85, h), shared)
                               for f, h in (("GT", 9), ("Pseudo", 8), ("Shape", 3))},
}

for title, flavors in cases.items():
    out = rank_flavors(FlavorScoreSet(1, flavors))
    print(f"== {title}")
    print(f"   order {' > '.join(out.order)}   points {out.points}   used HD95: {out.used_secondary}")
    for t in out.trail:
        stat = "" if t.statistic is None else f"stat={t.statistic:.3g}"
        p = "" if t.p_value is None else f"p={t.p_value:.3g}"
        print(f"   {t.test:<28} {stat:<14} {p:<12} {t.decision}")
    print()
