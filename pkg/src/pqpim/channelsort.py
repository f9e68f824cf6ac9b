"""Offline channel pre-sorting and permutation absorption.

Channels are grouped greedily by cosine similarity over calibration
activations so that each subvector holds mutually similar channels; the
resulting permutation is folded into the projection matrices, leaving the
attention block's output unchanged.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .kvstore import as_matrix


@dataclass(frozen=True)
class ChannelPermutation:
    """A grouping permutation: channel j of the permuted space is
    original channel ``order[j]``; consecutive blocks of head_dim/m
    channels form one subvector group."""

    order: tuple[int, ...]
    n_subvectors: int

    def __post_init__(self):
        d = len(self.order)
        if sorted(self.order) != list(range(d)):
            raise ConfigError("order is not a permutation")
        if d % self.n_subvectors != 0:
            raise ConfigError(f"head_dim {d} not divisible by m={self.n_subvectors}")

    @property
    def head_dim(self) -> int:
        return len(self.order)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Permute the channel (last) axis."""
        return x[..., list(self.order)]

    def to_json(self) -> str:
        return json.dumps({"order": list(self.order), "m": self.n_subvectors})

    @classmethod
    def from_json(cls, text: str) -> "ChannelPermutation":
        doc = json.loads(text)
        return cls(order=tuple(doc["order"]), n_subvectors=int(doc["m"]))

    @classmethod
    def identity(cls, head_dim: int, m: int) -> "ChannelPermutation":
        return cls(order=tuple(range(head_dim)), n_subvectors=m)


def sort_channels(samples, m: int, rng_seed: int) -> ChannelPermutation:
    """Group channels by cosine similarity of their calibration columns.

    Repeats m times: pick a random unassigned reference channel, rank all
    other unassigned channels by cosine similarity to it, and take the
    top head_dim/m - 1 to complete the group. All-zero channel columns get
    similarity 0 and a warning. Ties break toward the lower channel index.
    """
    x = as_matrix(samples, "calibration samples")
    d = x.shape[1]
    if m < 1 or d % m != 0:
        raise ConfigError(f"head_dim {d} must be divisible by m={m}")
    group = d // m

    norms = np.linalg.norm(x, axis=0)
    zero_cols = norms == 0
    if np.any(zero_cols):
        warnings.warn(
            f"{int(zero_cols.sum())} all-zero channel column(s); "
            "treating their similarity as 0",
            RuntimeWarning,
        )
    safe = np.where(zero_cols, 1.0, norms)
    unit = x / safe

    rng = np.random.default_rng(rng_seed)
    unassigned = list(range(d))
    order: list[int] = []
    for _ in range(m):
        ref = unassigned.pop(rng.integers(0, len(unassigned)))
        members = [ref]
        if group > 1 and unassigned:
            cand = np.array(unassigned)
            sims = unit[:, cand].T @ unit[:, ref]
            if zero_cols[ref]:
                sims = np.zeros_like(sims)
            sims = np.where(zero_cols[cand], 0.0, sims)
            # stable sort on (-sim, index): greedy top-k, lowest index wins ties
            pick = cand[np.lexsort((cand, -sims))][: group - 1]
            members.extend(int(c) for c in pick)
            taken = set(members)
            unassigned = [c for c in unassigned if c not in taken]
        order.extend(members)
    return ChannelPermutation(order=tuple(order), n_subvectors=m)


def absorb_permutation(wq, wk, wv, wo, pk: ChannelPermutation, pv: ChannelPermutation):
    """Fold channel permutations into the projection matrices.

    Projections act as row-vector maps: q = x @ wq, k = x @ wk, v = x @ wv,
    out = attn @ wo. Key-side permutation reorders the columns of wq and wk
    identically (inner products are preserved); the value-side permutation
    reorders wv's columns and wo's rows so the block output is unchanged.
    """
    wq = as_matrix(wq, "wq")
    wk = as_matrix(wk, "wk")
    wv = as_matrix(wv, "wv")
    wo = as_matrix(wo, "wo")
    d = pk.head_dim
    if pv.head_dim != d:
        raise DimensionError("pk and pv describe different head dims")
    if wq.shape[1] != d or wk.shape[1] != d or wv.shape[1] != d:
        raise DimensionError("projection output dims do not match head_dim")
    if wo.shape[0] != d:
        raise DimensionError("wo input dim does not match head_dim")
    ko = list(pk.order)
    vo = list(pv.order)
    return wq[:, ko], wk[:, ko], wv[:, vo], wo[vo, :]
