"""Pick one denoiser out of a noise-level sweep by registration quality."""

from __future__ import annotations

import math
from dataclasses import replace


def _score(candidate, pairs, cfg):
    from ..pirate import evaluate_registration, register

    run_cfg = replace(cfg, denoiser=candidate, use_denoiser=True)
    scores = []
    for pair in pairs:
        try:
            res = register(pair.fixed, pair.moving, run_cfg, record_trace=False)
        except FloatingPointError:
            return float("nan")
        if res.diverged:
            return float("nan")
        scores.append(evaluate_registration(pair, res.field)["dsc"])
    return float(sum(scores) / len(scores))


def select_denoiser(candidates, validation_pairs, pirate_cfg):
    """Register the validation pairs with each candidate plugged in.

    ``candidates`` is a list of denoisers or a dict ``{name: denoiser}``.
    Returns ``(best, table)`` where ``table`` lists ``(name, mean_dsc)`` in
    candidate order. The best candidate has the highest mean DSC; NaN scores
    (divergence) rank last and ties go to the earlier candidate.
    """
    items = list(candidates.items()) if isinstance(candidates, dict) else list(enumerate(candidates))
    if not items:
        raise ValueError("need at least one candidate denoiser")
    if len(items) == 1:
        return items[0][1], [(items[0][0], float("nan"))]
    pairs = list(validation_pairs)
    if not pairs:
        raise ValueError("need at least one validation pair")
    table = [(name, _score(cand, pairs, pirate_cfg)) for name, cand in items]
    best = 0
    for i, (_, s) in enumerate(table):
        b = table[best][1]
        if not math.isnan(s) and (math.isnan(b) or s > b):
            best = i
    return items[best][1], table
