import numpy as np

# discriminator outputs are clamped into [P_MIN, 1 - P_MIN]
P_MIN = 1e-7


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    targets = np.asarray(targets, dtype=np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -float(np.mean(log_p[np.arange(n), targets], dtype=np.float64))
    grad = np.exp(log_p)
    grad[np.arange(n), targets] -= 1
    return loss, grad / n


def clamped_probability(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamp probabilities and return the mask where the clamp is inactive."""
    clamped = np.clip(p, P_MIN, 1 - P_MIN)
    active = (p > P_MIN) & (p < 1 - P_MIN)
    return clamped, active
