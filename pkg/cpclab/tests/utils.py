import numpy as np


def numerical_gradient(f, x, eps=1e-5):
    """Central finite differences of the scalar function ``f`` at ``x`` (modified in place, restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        index = it.multi_index
        original = x[index]
        x[index] = original + eps
        upper = f()
        x[index] = original - eps
        lower = f()
        x[index] = original
        grad[index] = (upper - lower) / (2 * eps)
    return grad


def rel_error(analytic, numeric):
    """``|a - n| / (|a| + |n|)`` over the whole array (Euclidean norms)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denominator = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denominator)


def auc_oracle(scores, is_clean):
    """Pairwise comparison of every clean and noisy score, ties counting one half."""
    clean = [s for s, c in zip(scores, is_clean) if c]
    noisy = [s for s, c in zip(scores, is_clean) if not c]
    total = 0.0
    for a in clean:
        for b in noisy:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(clean) * len(noisy))


def ks_oracle(a, b):
    """Largest gap between the two empirical CDFs, scanning every observed value."""
    a, b = np.asarray(a), np.asarray(b)
    gap = 0.0
    for value in np.concatenate([a, b]):
        gap = max(gap, abs(np.mean(a <= value) - np.mean(b <= value)))
    return gap
