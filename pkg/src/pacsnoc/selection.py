"""Bootstrap selection of the best controller among posterior samples.

Sampling N_Q candidates and keeping the best invalidates a bound computed at
confidence delta; the caller therefore constructs the posterior at
delta' = delta / N_Q (``pacbayes.union_delta``) so the selected controller's
certificate still holds with probability 1 - delta.

Candidates are scored by out-of-bag evaluation: for each bootstrap resample
(size S, with replacement) every candidate is scored on the sequences the
resample excluded, and the selection score is the mean out-of-bag cost.
In-bag scoring would reduce to the training cost and defeat the point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sim


@dataclass(frozen=True)
class BootstrapEstimate:
    candidate: int
    per_resample_costs: np.ndarray  # (B,) out-of-bag means
    score: float                    # mean over resamples
    full_cost: float                # L-hat on the full dataset (tie breaker)
    resamples: int


def bootstrap_select(candidates, dataset: sim.NoiseDataset, problem,
                     b: int = 50, seed: int = 0,
                     max_redraws: int = 100):
    """Pick the candidate with the lowest mean out-of-bag cost.

    Returns (best index, list of BootstrapEstimate).  Ties break toward the
    lower full-dataset empirical cost.  Resamples whose out-of-bag set is
    empty are redrawn (up to ``max_redraws`` times each).
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("need at least one candidate")
    if b < 1:
        raise ValueError("need at least one resample")
    s = dataset.size
    # (n_candidates, S) per-sequence transformed costs, computed once
    per_seq = np.stack([problem.transformed_costs(theta, dataset)
                        for theta in candidates])
    rng = np.random.default_rng(seed)
    oob_masks = []
    for _ in range(b):
        for attempt in range(max_redraws + 1):
            picked = rng.integers(0, s, size=s)
            mask = np.ones(s, dtype=bool)
            mask[picked] = False
            if mask.any():
                break
        else:
            raise RuntimeError("could not draw a resample with a nonempty "
                               "out-of-bag set")
        oob_masks.append(mask)
    scores = np.stack([[per_seq[c, m].mean() for m in oob_masks]
                       for c in range(len(candidates))])
    full = per_seq.mean(axis=1)
    estimates = [
        BootstrapEstimate(candidate=c, per_resample_costs=scores[c],
                          score=float(scores[c].mean()),
                          full_cost=float(full[c]), resamples=b)
        for c in range(len(candidates))
    ]
    order = sorted(range(len(candidates)),
                   key=lambda c: (estimates[c].score, estimates[c].full_cost))
    return order[0], estimates
