from __future__ import annotations

import numpy as np

P_CLIP = 1e-7


def bce_loss(p, y, positive_weight: float = 1.0) -> tuple[float, np.ndarray]:
    """Mean (optionally positive-weighted) binary cross-entropy and dL/dp.

    Probabilities are clipped to [1e-7, 1 - 1e-7]; the gradient is evaluated
    at the clipped value and passed straight through the clip.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    pc = np.clip(p, P_CLIP, 1.0 - P_CLIP)
    n = p.size
    loss = -np.mean(positive_weight * y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    grad = -(positive_weight * y / pc - (1.0 - y) / (1.0 - pc)) / n
    return float(loss), grad
