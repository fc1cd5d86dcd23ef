"""Experiment drivers shared by unit and acceptance tests."""
import numpy as np

from fedmor import bandit as nts
from fedmor.numerics import stream
from fedmor.router import new_router


def stationary_bandit(seed, rounds=1000, best=1, p_good=0.9, p_bad=0.1, K=3, d_h=16):
    """Fraction of the last 100 rounds that pick the best arm; 1 marks a good outcome."""
    router = new_router(d_h, K, (32,), stream(seed, "env/router"))
    state = nts.init_bandit(router, nts.BanditConfig())
    ctx = stream(seed, "env/context")
    env = stream(seed, "env/reward")
    ts = stream(seed, "bandit/thompson")
    picks = []
    for _ in range(rounds):
        c = ctx.standard_normal(d_h)
        arm = nts.select_arm(state, router, c, ts).arm
        good = env.random() < (p_good if arm == best else p_bad)
        # environment reports improvement; the inverted convention maps improvement to 1
        r = nts.bandit_feedback(1.0 if good else 0.0, 0.5, invert=True)
        nts.online_update(state, router, c, arm, r)
        picks.append(arm)
    return float(np.mean(np.array(picks[-100:]) == best))
