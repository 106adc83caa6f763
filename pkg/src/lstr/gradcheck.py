"""Central finite-difference check of the analytic training gradients.

Coordinates whose perturbation changes the Top-k selection or a ghost ReLU
gate are skipped: the loss is only piecewise smooth and the straight-through
gradient is exact only inside a region with a fixed active set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .model import Batch, LstrModel, batch_loss
from .numerics import Rng


@dataclass
class GradCheckReport:
    checked: int = 0
    skipped_unstable: int = 0
    max_rel_error: float = 0.0
    failures: list[tuple[str, tuple, float, float]] = field(default_factory=list)
    per_tensor: dict[str, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures and self.checked > 0


def check_gradients(
    model: LstrModel,
    batch: Batch,
    cfg: TrainConfig,
    dead_mask: np.ndarray | None,
    rng: Rng,
    coords_per_tensor: int = 12,
    eps: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-8,
) -> GradCheckReport:
    base = batch_loss(model, batch, cfg, dead_mask)
    consts = (base.H_lat - model.ltt.mu, base.residual)
    report = GradCheckReport()
    params = model.params()
    for name, tensor in params.items():
        if name == "W_skip" and cfg.disable_skip:
            continue
        analytic = base.grads[name]
        flat = tensor.reshape(-1)
        n = flat.size
        picks = rng.permutation(n)[: min(coords_per_tensor, n)]
        # always include the largest-gradient coordinate so each tensor is exercised
        picks = np.unique(np.concatenate([picks, [int(np.argmax(np.abs(analytic)))]]))
        done = 0
        for i in picks:
            orig = flat[i]
            vals = []
            stable = True
            for sign in (1.0, -1.0):
                flat[i] = orig + sign * eps
                res = batch_loss(model, batch, cfg, dead_mask, want_grads=False, ghost_constants=consts)
                if not (np.array_equal(res.mask, base.mask) and np.array_equal(res.ghost_relu, base.ghost_relu)):
                    stable = False
                vals.append(res.loss.total)
            flat[i] = orig
            if not stable:
                report.skipped_unstable += 1
                continue
            num = (vals[0] - vals[1]) / (2 * eps)
            ana = float(analytic.reshape(-1)[i])
            err = abs(num - ana)
            scale = max(abs(num), abs(ana))
            rel = err / scale if scale > 0 else 0.0
            if err > rtol * scale + atol:
                report.failures.append((name, np.unravel_index(i, tensor.shape), ana, num))
            elif scale > 1e-6:
                report.max_rel_error = max(report.max_rel_error, rel)
            report.checked += 1
            done += 1
        report.per_tensor[name] = done
    return report
