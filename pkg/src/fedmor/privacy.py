"""Black-box membership inference on reward margins.

The attacker sees only what a client exports (scores) and guesses
"member" when the margin score(x, y+) - score(x, y-) exceeds a threshold.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ContractError
from .reward import RewardModel, query_score
from .synthdata import PreferencePair

FPR_GRID = (0.01, 0.05, 0.10)


@dataclass(frozen=True)
class MiaDataset:
    member_margins: np.ndarray
    nonmember_margins: np.ndarray
    variant: str = "norm"

    def __post_init__(self):
        if len(self.member_margins) != len(self.nonmember_margins):
            raise ContractError("membership dataset must be balanced 1:1")
        if not (np.all(np.isfinite(self.member_margins)) and np.all(np.isfinite(self.nonmember_margins))):
            raise ContractError("margins must be finite")


def parse_variant(variant: str) -> tuple[str, float | None]:
    """'norm', 'raw' or 'norm_clip(c)' / 'norm_clip:c'."""
    if variant in ("norm", "raw"):
        return variant, None
    if variant.startswith("norm_clip"):
        arg = variant[len("norm_clip"):].strip("():")
        c = float(arg)
        if c <= 0:
            raise ContractError("clip level must be positive")
        return "norm_clip", c
    raise ContractError(f"unknown margin variant {variant!r}")


def _scores(rm: RewardModel, X, Y, kind: str, c: float | None) -> np.ndarray:
    s = np.atleast_1d(query_score(rm, X, Y, standardize=kind != "raw"))
    # clipping acts on each exported score, before the margin is formed
    return np.clip(s, -c, c) if kind == "norm_clip" else s


def margins(rm: RewardModel, pairs: PreferencePair, variant: str = "norm") -> np.ndarray:
    kind, c = parse_variant(variant)
    return (_scores(rm, pairs.context, pairs.chosen, kind, c)
            - _scores(rm, pairs.context, pairs.rejected, kind, c))


def collect_margins(rm: RewardModel, member_pairs: PreferencePair, nonmember_pairs: PreferencePair,
                    variant: str = "norm") -> MiaDataset:
    if len(member_pairs) != len(nonmember_pairs):
        raise ContractError("member and non-member sets must have equal size")
    return MiaDataset(margins(rm, member_pairs, variant), margins(rm, nonmember_pairs, variant), variant)


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def tpr_at(self, target_fpr: float) -> float:
        """TPR of the piecewise-linear ROC at an exact FPR (top of any vertical step there)."""
        f, t = self.fpr, self.tpr
        on = f == target_fpr
        if on.any():
            return float(t[on].max())
        j = int(np.searchsorted(f, target_fpr, side="right"))  # first vertex beyond the target
        i = j - 1
        w = (target_fpr - f[i]) / (f[j] - f[i])
        return float(t[i] + w * (t[j] - t[i]))


def roc_auc(data: MiaDataset) -> RocCurve:
    """ROC over all distinct thresholds (score >= t means member), AUC by trapezoid.

    Tied scores form one threshold step, so a member/non-member tie
    contributes a diagonal segment worth one half.
    """
    pos = np.asarray(data.member_margins, dtype=np.float64)
    neg = np.asarray(data.nonmember_margins, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise ContractError("ROC needs at least one member and one non-member")
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(scores))[0], len(scores) - 1]
    tp = np.cumsum(labels)[ends]
    fp = np.cumsum(1 - labels)[ends]
    tpr = np.r_[0.0, tp / len(pos)]
    fpr = np.r_[0.0, fp / len(neg)]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr, tpr, auc)


def mann_whitney_auc(pos, neg) -> float:
    """P(member > non-member) + P(tie) / 2 by exhaustive comparison."""
    pos = np.asarray(pos, dtype=np.float64)[:, None]
    neg = np.asarray(neg, dtype=np.float64)[None, :]
    return float(np.mean((pos > neg) + 0.5 * (pos == neg)))


def mia_row(data: MiaDataset) -> dict:
    roc = roc_auc(data)
    row = {"variant": data.variant, "auc": roc.auc}
    for f in FPR_GRID:
        row[f"tpr@{int(round(f * 100))}%"] = roc.tpr_at(f)
    return row


def mia_report(reward_models: list[RewardModel], members: list[PreferencePair],
               nonmembers: list[PreferencePair],
               variants=("norm_clip(1.5)", "norm_clip(2.0)", "norm", "raw")) -> list[dict]:
    """One row per variant; metrics averaged over the attacked clients."""
    rows = []
    for v in variants:
        per_client = [mia_row(collect_margins(rm, m, n, v))
                      for rm, m, n in zip(reward_models, members, nonmembers)]
        row = {"variant": v}
        for key in per_client[0]:
            if key != "variant":
                row[key] = float(np.mean([r[key] for r in per_client]))
        rows.append(row)
    return rows
