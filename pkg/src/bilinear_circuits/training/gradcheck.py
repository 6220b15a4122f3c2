"""Central finite-difference checks of the hand-written gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..rng import stream

# Denominator floor for the relative error. Below it the comparison is
# effectively absolute, which keeps round-off in near-zero gradients
# (about 1e-11 at eps=1e-5 for O(1) losses) from reading as a large
# relative error.
REL_FLOOR = 1e-4


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_excluded: int
    per_param: dict[str, float] = field(default_factory=dict)


def grad_check(model, batch, eps: float = 1e-5, n_coords: int = 200, seed: int = 0) -> GradCheckResult:
    """Compare analytic gradients with central differences on sampled coordinates.

    Every parameter tensor is sampled, in proportion to its size and at least
    eight coordinates each (or all of them if smaller); the total is at least
    ``n_coords`` when the model has that many parameters. Coordinates flagged by
    ``model.kink_mask`` (relu pre-activations within 1e-3 of zero) are skipped.
    The relative error is ``|a - n| / max(|a|, |n|, REL_FLOOR)``.
    """
    params = model.params()
    _, grads, _ = model.loss_and_grads(batch)
    kinks = model.kink_mask(batch)
    rng = stream(seed, "gradcheck")
    total = sum(p.size for p in params.values())

    worst = 0.0
    checked = excluded = 0
    per_param = {}
    for name in sorted(params):
        p = params[name]
        want = min(p.size, max(8, int(np.ceil(n_coords * p.size / total))))
        coords = rng.choice(p.size, size=want, replace=False)
        mask = kinks.get(name)
        flat = p.reshape(-1)  # view: edits land in the live parameter
        g = np.asarray(grads[name]).reshape(-1)
        err_p = 0.0
        for c in coords:
            if mask is not None and mask.reshape(-1)[c]:
                excluded += 1
                continue
            orig = flat[c]
            flat[c] = orig + eps
            up = model.loss(batch)
            flat[c] = orig - eps
            down = model.loss(batch)
            flat[c] = orig
            num = (up - down) / (2.0 * eps)
            err = abs(g[c] - num) / max(abs(g[c]), abs(num), REL_FLOOR)
            err_p = max(err_p, err)
            checked += 1
        per_param[name] = err_p
        worst = max(worst, err_p)
    return GradCheckResult(worst, checked, excluded, per_param)
