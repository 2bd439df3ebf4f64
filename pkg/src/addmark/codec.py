"""Embedding, inner products, detection statistics, decoding, calibration.

Embedding adds sum_k m_k w_k to the image.  Detection uses S = sum_k
|Gamma_k| (no dictionary) or S_D = max_{m in D} <m, Gamma> (dictionary),
where Gamma_k = <w_k, x>.  Decoding takes sign(Gamma_k) per bit, or the
dictionary argmax.  Thresholds are calibrated as empirical quantiles of
scores on held-out unwatermarked images.
"""

import json
import math

import numpy as np

from addmark.tensor import ImageTensor, Message


class Dictionary:
    """A nonempty set of distinct K-bit messages with cached d_min.

    d_min is the minimum pairwise Hamming distance; for a singleton
    dictionary it is the sentinel K + 1.
    """

    def __init__(self, messages):
        if not messages:
            raise ValueError("dictionary must be nonempty")
        K = messages[0].K
        if any(m.K != K for m in messages):
            raise ValueError("all dictionary messages must have equal length")
        mat = np.stack([m.bits for m in messages])
        if np.unique(mat, axis=0).shape[0] != mat.shape[0]:
            raise ValueError("dictionary contains duplicate messages")
        # sort by '+'/'-' string so argmax tie-breaking is deterministic
        # (first max = lexicographically smallest) and file order irrelevant
        msgs = sorted((Message(row) for row in mat), key=Message.to_string)
        self.matrix = np.stack([m.bits for m in msgs]).astype(np.float64)
        self.messages = msgs
        self.K = K
        if len(self.messages) == 1:
            self.d_min = K + 1
        else:
            dots = self.matrix @ self.matrix.T
            ham = (K - dots) / 2
            np.fill_diagonal(ham, K + 1)
            self.d_min = int(ham.min())

    def __len__(self):
        return len(self.messages)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("# one message per line, '+'/'-' or '1'/'0'\n")
            for m in self.messages:
                fh.write(m.to_string() + "\n")

    @classmethod
    def load(cls, path):
        msgs = []
        with open(path) as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if line:
                    msgs.append(Message.from_string(line))
        return cls(msgs)


class DetectionReport:
    def __init__(self, gamma, S, decision, decoded, threshold_used, mode,
                 S_dict=None):
        self.gamma = np.asarray(gamma, dtype=np.float64)
        self.S = float(S)
        self.S_dict = None if S_dict is None else float(S_dict)
        self.decision = bool(decision)
        self.decoded = decoded
        self.threshold_used = float(threshold_used)
        self.mode = mode

    def to_dict(self):
        return {
            "gamma": self.gamma.tolist(),
            "S": self.S,
            "S_dict": self.S_dict,
            "decision": self.decision,
            "decoded": self.decoded.to_string(),
            "threshold_used": self.threshold_used,
            "mode": self.mode,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def embed(x, m, w, clip=True):
    """x + sum_k m_k w_k.  With clip=True the result is clamped to the
    image's declared range; with clip=False it is returned unclipped (and
    marked unbounded, since values may leave the range)."""
    if x.shape != w.shape:
        raise ValueError(f"image shape {x.shape} != watermark shape {w.shape}")
    if m.K != w.K:
        raise ValueError(f"message has {m.K} bits, watermark has {w.K}")
    out = x.data + m.bits.astype(np.float64) @ w.vectors
    tensor = ImageTensor(*x.shape, out, value_range="unbounded")
    if clip:
        clipped = np.clip(out, *_range_bounds(x.value_range)) \
            if x.value_range != "unbounded" else out
        tensor = ImageTensor(*x.shape, clipped, value_range=x.value_range)
    return tensor


def _range_bounds(value_range):
    return (0.0, 1.0) if value_range == "unit" else (0.0, 255.0)


def inner_products(x, w):
    """Gamma_k = <w_k, flatten(x)> in float64 accumulation."""
    if isinstance(x, ImageTensor):
        if x.shape != w.shape:
            raise ValueError(f"image shape {x.shape} != watermark shape {w.shape}")
        vec = x.data
    else:
        vec = np.asarray(x, dtype=np.float64).ravel()
        if vec.size != w.D:
            raise ValueError("vector length does not match watermark dimension")
    return w.vectors @ vec


def inner_products_matrix(X, w):
    """Gamma for a batch of flattened images (n x D) -> n x K."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != w.D:
        raise ValueError("batch dimension does not match watermark dimension")
    return X @ w.vectors.T


def statistic_S(gamma):
    return float(np.sum(np.abs(gamma)))


def statistic_S_dict(gamma, dictionary):
    """(max_{m in D} <m, gamma>, argmax message); ties break to the
    lexicographically smallest message."""
    scores = dictionary.matrix @ np.asarray(gamma, dtype=np.float64)
    idx = int(np.argmax(scores))  # first max = lexicographically smallest
    return float(scores[idx]), dictionary.messages[idx]


def decode_sign(gamma):
    """sign(Gamma_k) per bit, with sign(0) := +1."""
    bits = np.where(np.asarray(gamma) >= 0, 1, -1)
    return Message(bits)


def decode_dict(gamma, dictionary):
    _, m = statistic_S_dict(gamma, dictionary)
    return m


def calibrate_threshold(scores, alpha):
    """Empirical (1 - alpha)-quantile with the 'higher' convention: the
    smallest score whose empirical CDF reaches 1 - alpha."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must be in (0, 1]")
    scores = np.sort(np.asarray(scores, dtype=np.float64))
    needed = math.ceil(2.0 / alpha)
    if scores.size < needed:
        raise ValueError(
            f"need at least {needed} calibration scores for alpha={alpha}, "
            f"got {scores.size}"
        )
    idx = math.ceil((1.0 - alpha) * scores.size) - 1
    idx = min(max(idx, 0), scores.size - 1)
    return float(scores[idx])


def dictionary_improvement_condition(mu, sigma, d_min, dict_size):
    """True when |D| <= (mu^2 sqrt(d_min)/(mu^2+sigma^2)) *
    exp(mu^2 (d_min-1)/(2 sigma^2)); evaluated in the log domain."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if d_min < 1:
        raise ValueError("d_min must be >= 1")
    log_bound = (
        math.log(mu**2 * math.sqrt(d_min) / (mu**2 + sigma**2))
        + mu**2 * (d_min - 1) / (2.0 * sigma**2)
    )
    return math.log(dict_size) <= log_bound


def dictionary_size_bound(mu, sigma, d_min):
    """The right-hand side of the improvement condition."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return (
        mu**2 * math.sqrt(d_min) / (mu**2 + sigma**2)
    ) * math.exp(mu**2 * (d_min - 1) / (2.0 * sigma**2))


def oracle_watermark(model, r_star, K, shape=None, value_range="unbounded"):
    """Ground-truth watermark: K orthonormal directions in the null space
    of B^T, each scaled to squared norm r_star."""
    from addmark.trainer import WatermarkSet

    D, d = model.D, model.d
    if K > D - d:
        raise ValueError(f"cannot fit {K} orthogonal vectors outside a "
                         f"{d}-dim subspace of R^{D}")
    # Orthonormal basis of U-perp: QR of the complement projector columns.
    proj_perp = np.eye(D) - model.U_basis @ model.U_basis.T
    q, r = np.linalg.qr(proj_perp)
    keep = np.abs(np.diag(r)) > 1e-10
    basis = q[:, keep]
    vectors = math.sqrt(r_star) * basis[:, :K].T
    return WatermarkSet(vectors, shape or (1, 1, D), value_range=value_range)


def detect_and_decode(x, w, threshold, dictionary=None):
    """Full detection + decoding pass producing a DetectionReport."""
    gamma = inner_products(x, w)
    S = statistic_S(gamma)
    if dictionary is not None:
        if dictionary.K != w.K:
            raise ValueError(
                f"dictionary has {dictionary.K}-bit messages, watermark has {w.K}"
            )
        S_d, decoded = statistic_S_dict(gamma, dictionary)
        return DetectionReport(
            gamma, S, S_d > threshold, decoded, threshold, "dictionary", S_dict=S_d
        )
    return DetectionReport(
        gamma, S, S > threshold, decode_sign(gamma), threshold, "no_dictionary"
    )
