"""SGD training of the K-bit additive watermark.

Per minibatch: sample fresh messages per image, form per-image watermarks
through the (frozen) feature extractor and trainable watermark maps, embed,
apply one sampled distortion, and take a subgradient step on the margin
loss plus the D-normalized norm penalty.  After training, the deployed
watermark is the dataset-level average of the per-image maps.

The "constant" map kind makes each map a plain bias vector, so the
watermark is learned directly in pixel space; the "affine" kind adds a
linear term in the extracted features.
"""

import csv
import hashlib
import json
import math
import struct

import numpy as np

from addmark import distortions
from addmark import losses as losses_mod
from addmark.losses import MarginLoss
from addmark.tensor import ImageTensor, SeededRng

ADDWM_MAGIC = b"ADDW"


class FeatureExtractor:
    """Frozen linear feature map psi: R^D -> R^{d_f}.

    identity_downsample area-averages each channel onto a fixed small grid;
    frozen_random_projection applies a seeded Gaussian matrix (or an
    explicitly supplied one).
    """

    def __init__(self, kind, d_f, seed=0, shape=None, matrix=None):
        if kind not in ("identity_downsample", "frozen_random_projection"):
            raise ValueError(f"unknown extractor kind {kind!r}")
        self.kind = kind
        self.d_f = int(d_f)
        self.seed = int(seed)
        self.shape = tuple(shape) if shape is not None else None
        if kind == "frozen_random_projection":
            D = int(np.prod(self.shape))
            if matrix is not None:
                matrix = np.asarray(matrix, dtype=np.float64)
                if matrix.shape != (self.d_f, D):
                    raise ValueError("projection matrix must be d_f x D")
                self.matrix = matrix
            else:
                g = SeededRng(self.seed, stream_id=0xFEA7).generator
                self.matrix = g.standard_normal((self.d_f, D)) / math.sqrt(D)
        else:
            c, h, w = self.shape
            grid = max(1, int(round(math.sqrt(self.d_f / c))))
            if c * grid * grid != self.d_f:
                raise ValueError(
                    f"identity_downsample needs d_f = C*g*g, got d_f={self.d_f}, C={c}"
                )
            self.grid = grid
            self.matrix = None

    def __call__(self, img):
        if isinstance(img, ImageTensor):
            if img.shape != self.shape:
                raise ValueError(f"image shape {img.shape} != {self.shape}")
            vec = img.data
        else:
            vec = np.asarray(img, dtype=np.float64).ravel()
            if vec.size != int(np.prod(self.shape)):
                raise ValueError("flattened image has wrong length")
        return self.features_matrix(vec[None])[0]

    def features_matrix(self, X):
        """Features for a batch of flattened images (n x D)."""
        if self.kind == "frozen_random_projection":
            return X @ self.matrix.T
        c, h, w = self.shape
        g = self.grid
        arr = X.reshape(-1, c, h, w)
        # area-average onto a g x g grid using cumulative sums over
        # variable-size cells
        ys = np.linspace(0, h, g + 1).round().astype(int)
        xs = np.linspace(0, w, g + 1).round().astype(int)
        out = np.empty((X.shape[0], c, g, g))
        for i in range(g):
            for j in range(g):
                cell = arr[:, :, ys[i] : ys[i + 1], xs[j] : xs[j + 1]]
                out[:, :, i, j] = cell.mean(axis=(2, 3))
        return out.reshape(X.shape[0], self.d_f)


class TrainConfig:
    def __init__(
        self,
        K,
        beta_alg,
        loss="hinge",
        epochs=30,
        batch_size=64,
        learning_rate=0.05,
        lr_schedule="constant",
        momentum=0.9,
        distortion_pool=None,
        seed=0,
        map_kind="constant",
        polish_steps=25,
        init_scale=0.0,
    ):
        if K < 1:
            raise ValueError("K must be >= 1")
        if beta_alg <= 0:
            raise ValueError("beta_alg must be positive")
        if lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {lr_schedule!r}")
        if map_kind not in ("constant", "affine"):
            raise ValueError(f"unknown map kind {map_kind!r}")
        self.K = int(K)
        self.beta_alg = float(beta_alg)
        self.loss = MarginLoss(loss) if isinstance(loss, str) else loss
        self.epochs = int(epochs)
        self.batch_size = int(batch_size)
        self.learning_rate = float(learning_rate)
        self.lr_schedule = lr_schedule
        self.momentum = float(momentum)
        self.distortion_pool = list(
            distortion_pool
            if distortion_pool is not None
            else [distortions.DistortionSpec("identity")]
        )
        self.seed = int(seed)
        self.map_kind = map_kind
        self.polish_steps = int(polish_steps)
        if init_scale < 0:
            raise ValueError("init_scale must be nonnegative")
        self.init_scale = float(init_scale)

    def beta_theory(self, D):
        """Theory-scale penalty: the algorithm normalizes the penalty by D."""
        return self.beta_alg / D

    def to_dict(self):
        return {
            "K": self.K,
            "beta_alg": self.beta_alg,
            "loss": self.loss.kind,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "lr_schedule": self.lr_schedule,
            "momentum": self.momentum,
            "distortion_pool": [s.to_dict() for s in self.distortion_pool],
            "seed": self.seed,
            "map_kind": self.map_kind,
            "polish_steps": self.polish_steps,
            "init_scale": self.init_scale,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        pool = d.pop("distortion_pool", None)
        if pool is not None:
            pool = [distortions.DistortionSpec.from_dict(s) for s in pool]
        return cls(distortion_pool=pool, **d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class WatermarkSet:
    """K fixed watermark vectors in R^D plus provenance metadata."""

    def __init__(self, vectors, shape, value_range="unit", config_digest=""):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] < 1:
            raise ValueError("vectors must be a K x D matrix, K >= 1")
        if vectors.shape[1] != int(np.prod(shape)):
            raise ValueError("vector length does not match image shape")
        self.vectors = vectors
        self.vectors.flags.writeable = False
        self.shape = tuple(int(s) for s in shape)
        self.value_range = value_range
        self.config_digest = config_digest

    @property
    def K(self):
        return self.vectors.shape[0]

    @property
    def D(self):
        return self.vectors.shape[1]

    def norms_squared(self):
        return np.sum(self.vectors**2, axis=1)

    def save(self, path, extra_header=None):
        header = {
            "K": self.K,
            "D": self.D,
            "shape": list(self.shape),
            "value_range": self.value_range,
            "config_digest": self.config_digest,
        }
        header.update(extra_header or {})
        with open(path, "wb") as fh:
            fh.write(ADDWM_MAGIC)
            blob = json.dumps(header, sort_keys=True).encode()
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(self.vectors.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            if fh.read(4) != ADDWM_MAGIC:
                raise ValueError(f"{path}: not a watermark file")
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen))
            vecs = np.frombuffer(
                fh.read(8 * header["K"] * header["D"]), dtype="<f8"
            ).reshape(header["K"], header["D"])
        return cls(
            vecs,
            header["shape"],
            value_range=header.get("value_range", "unit"),
            config_digest=header.get("config_digest", ""),
        )


def feasible_ball_radius(cfg, D):
    """R with R^2 = K*(V(0) - inf V)/beta_theory; every minimizer of the
    finite-sample objective lies in the ball of this radius."""
    beta = cfg.beta_theory(D)
    v0 = cfg.loss.value_at_zero()
    return math.sqrt(cfg.K * (v0 - cfg.loss.inf_value()) / beta)


def uniform_deviation_bound(n, delta, K, L, R, trace_Sigma_X):
    """High-probability gap between the finite-sample and population
    objectives over the feasible ball."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must be in (0, 1)")
    lead = L * R * math.sqrt(K * trace_Sigma_X)
    term1 = (4.0 + (25.0 / 3.0) * math.sqrt(math.log(4.0 / delta))) / math.sqrt(n)
    term2 = (
        (75.0 * math.log(2.0 * math.e) / (2.0 * math.log(2.0)))
        * math.log(4.0 * n / delta)
        * math.log(4.0 / delta)
        / n
    )
    return lead * (term1 + term2)


def _top_eigenvalue(X, iters=20):
    """Top eigenvalue of X^T X / n by power iteration (matvecs only)."""
    n, D = X.shape
    v = np.full(D, 1.0 / math.sqrt(D))
    lam = 0.0
    for _ in range(iters):
        u = X.T @ (X @ v) / n
        lam = float(np.linalg.norm(u))
        if lam == 0.0:
            return 0.0
        v = u / lam
    return lam


class _TrainState:
    """Trainable parameters: per-bit bias (K x D) and, in affine mode, a
    per-bit linear term (K x D x d_f) on the extracted features."""

    def __init__(self, K, D, d_f, affine):
        self.bias = np.zeros((K, D))
        self.lin = np.zeros((K, D, d_f)) if affine else None
        self.v_bias = np.zeros_like(self.bias)
        self.v_lin = np.zeros_like(self.lin) if affine else None

    def watermarks(self, F):
        """Per-image watermarks, B x K x D, for a feature batch F (B x d_f)."""
        if self.lin is None:
            return np.broadcast_to(self.bias, (F.shape[0],) + self.bias.shape)
        return self.bias[None] + np.einsum("kdf,bf->bkd", self.lin, F)


def _distort_batch(Xt, spec, shape, rng):
    if spec.kind == "identity":
        return Xt
    rows = []
    for i in range(Xt.shape[0]):
        img = ImageTensor(*shape, Xt[i], value_range="unbounded")
        rows.append(distortions.apply(spec, img, rng).data)
    return np.stack(rows)


def minibatch_loss_and_grad(state, Xb, F, M, loss, beta_alg, spec, shape, rng):
    """Loss and analytic gradients for one minibatch.

    Straight-through for non-differentiable distortions: the gradient of
    the distortion with respect to its input is taken as ``linear_gain``
    times identity (exact for identity/brightness/contrast, where the
    objective gradient is then exact as well).
    """
    B, D = Xb.shape
    gain = distortions.linear_gain(spec)

    if state.lin is None:
        W = state.bias  # K x D
        Xt = Xb + M @ W
        Xtd = _distort_batch(Xt, spec, shape, rng)
        T = M * (Xtd @ W.T)
        data_loss = float(np.mean(np.sum(loss.value(T), axis=1)))
        pen = (beta_alg / D) * float(np.sum(W**2))
        dV = loss.subgradient(T)  # B x K
        dVM = dV * M
        grad_bias = (dVM.T @ Xtd + gain * (M.T @ dVM) @ W) / B
        grad_bias += (2.0 * beta_alg / D) * W
        return data_loss + pen, data_loss, pen, grad_bias, None

    Wb = state.watermarks(F)  # B x K x D
    Xt = Xb + np.einsum("bk,bkd->bd", M, Wb)
    Xtd = _distort_batch(Xt, spec, shape, rng)
    T = M * np.einsum("bkd,bd->bk", Wb, Xtd)
    data_loss = float(np.mean(np.sum(loss.value(T), axis=1)))
    pen = (beta_alg / D) * float(np.mean(np.sum(Wb**2, axis=(1, 2))))

    dV = loss.subgradient(T)  # B x K
    # direct term: d t_{bk} / d w_{bk} is m_{bk} * distorted image
    gw = (dV * M)[:, :, None] * Xtd[:, None, :]
    # embedding path: d Xtd / d w_{bj} = gain * m_{bj} I
    coupling = np.einsum("bk,bkd->bd", dV * M, Wb)  # B x D
    gw += gain * M[:, :, None] * coupling[:, None, :]
    gw += (2.0 * beta_alg / D) * Wb
    gw /= B

    grad_bias = gw.sum(axis=0)
    grad_lin = np.einsum("bkd,bf->kdf", gw, F)
    return data_loss + pen, data_loss, pen, grad_bias, grad_lin


def exact_objective_and_grad(W, X, loss, beta_theory, chunk=2048, messages=None):
    """Objective L_n and its gradient on the identity channel, with the
    message expectation taken over ``messages`` (a fixed sign-pattern
    matrix) or, by default, exactly over all 2^K patterns.

    The exhaustive default is feasible for K <= 12; for larger K the
    polish phase passes a fixed Monte-Carlo message set so the objective
    stays deterministic across descent steps.
    """
    K, D = W.shape
    n = X.shape[0]
    if messages is not None:
        M = np.asarray(messages, dtype=np.float64)
    else:
        M = np.array(
            [[1.0 if (i >> k) & 1 else -1.0 for k in range(K)] for i in range(2**K)]
        )
    G = W @ W.T
    shift = M @ G  # 2^K x K
    total_val = 0.0
    P_acc = np.zeros((n, K))  # sum over messages of dV*M, per datum
    Q = np.zeros((M.shape[0], K))  # sum over data of dV*M, per message
    for start in range(0, n, chunk):
        Xc = X[start : start + chunk]
        gamma = Xc @ W.T
        t = M[None] * (gamma[:, None, :] + shift[None])
        total_val += float(np.sum(loss.value(t)))
        dVM = loss.subgradient(t) * M[None]
        P_acc[start : start + chunk] = dVM.sum(axis=1)
        Q += dVM.sum(axis=0)
    N = n * M.shape[0]
    value = total_val / N + beta_theory * float(np.sum(W * W))
    grad = (P_acc.T @ X + (M.T @ Q) @ W + Q.T @ (M @ W)) / N
    grad += 2.0 * beta_theory * W
    return value, grad


def gaussian_objective_and_grad(W, X, loss, beta_theory, nodes=40):
    """Objective and gradient on the identity channel with the message
    expectation taken semi-analytically.

    Conditioned on bit k's own sign, the margin is t_k = ||w_k||^2
    +/- <w_k, x> + xi_k where the cross-talk xi_k = sum_{j != k} s_j G_kj
    has i.i.d. sign coefficients independent of everything else.  xi_k is
    approximated as N(0, v_k) with v_k = sum_{j != k} G_kj^2 and the
    expectation evaluated by Gauss-Hermite quadrature.  Unlike Monte-Carlo
    messages this is deterministic and penalizes cross-talk explicitly,
    so it remains usable when 2^K enumeration is out of reach.
    """
    from addmark.losses import _gauss_hermite

    K, D = W.shape
    n = X.shape[0]
    z, u = _gauss_hermite(nodes)
    G = W @ W.T
    a = np.diag(G).copy()  # ||w_k||^2
    Goff = G - np.diag(a)
    v = np.sum(Goff**2, axis=1)
    sigma = np.sqrt(np.maximum(v, 1e-300))
    gamma = X @ W.T  # n x K

    # t_plus/t_minus: n x K x nodes
    base = a[None, :, None] + sigma[None, :, None] * z[None, None, :]
    tp = base + gamma[:, :, None]
    tm = base - gamma[:, :, None]
    val = float(
        np.mean(np.sum(0.5 * (loss.value(tp) + loss.value(tm)) @ u, axis=1))
    )
    dp = loss.subgradient(tp)
    dm = loss.subgradient(tm)
    A = 0.5 * (dp + dm) @ u  # n x K, coefficient of d a_k
    Bc = 0.5 * (dp - dm) @ u  # n x K, coefficient of d gamma_ik
    C = 0.5 * (dp + dm) @ (u * z)  # n x K, coefficient of d sigma_k

    a_bar = A.mean(axis=0)
    c_bar = C.mean(axis=0) / sigma
    # cross-talk force: sum_j (c_k/sigma_k + c_j/sigma_j) G_kj w_j
    coeff = Goff * (c_bar[:, None] + c_bar[None, :])
    grad = (Bc.T @ X) / n + 2.0 * a_bar[:, None] * W + coeff @ W
    grad += 2.0 * beta_theory * W
    return val + beta_theory * float(np.sum(W * W)), grad


def _polish(W, X, loss, beta_theory, steps, mode="exact"):
    """Deterministic preconditioned descent with backtracking on the
    identity-channel objective (exact message enumeration, or the Gaussian
    cross-talk form for large K).

    The data-term Hessian is dominated by the empirical second moment
    X^T X / n, whose spectrum spans many orders of magnitude for natural
    images (the uncentered mean alone is huge), so scalar-step descent
    stalls.  Preconditioning by 1 / (2*beta + c * s_j^2 / n) along the
    right singular directions of X equalizes the curvature; directions
    outside the data span take the plain 1 / (2*beta) Newton step on the
    penalty."""
    if mode == "exact":
        def objective(V):
            return exact_objective_and_grad(V, X, loss, beta_theory)
    else:
        def objective(V):
            return gaussian_objective_and_grad(V, X, loss, beta_theory)

    n = X.shape[0]
    # c bounds the margin-loss curvature (1/4 for logistic; reused as a
    # smoothing surrogate at the hinge kink)
    c = 0.25
    _, s, Vt = np.linalg.svd(X, full_matrices=False)
    p_span = 1.0 / (2.0 * beta_theory + c * s**2 / n)
    p_free = 1.0 / (2.0 * beta_theory)

    def precondition(G):
        coeff = G @ Vt.T  # K x rank
        return p_free * G + coeff * (p_span - p_free) @ Vt

    lr = 1.0
    val, grad = objective(W)
    for _ in range(steps):
        cand = W - lr * precondition(grad)
        cand_val, cand_grad = objective(cand)
        if cand_val <= val + 1e-15:
            W, val, grad = cand, cand_val, cand_grad
            lr = min(1.5 * lr, 1.0)  # recover after transient backtracking
        else:
            lr *= 0.5
            if lr < 1e-12:
                break
    return W


def train(data, cfg, psi=None, shape=None, value_range=None, log_path=None):
    """Run the SGD training loop and return the deployed WatermarkSet.

    ``data`` is a list of ImageTensor (uniform shape) or an n x D array
    (then ``shape`` gives the image layout, defaulting to 1 x 1 x D).
    """
    if isinstance(data, np.ndarray):
        X = np.asarray(data, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValueError("data array must be n x D with n >= 1")
        shape = shape or (1, 1, X.shape[1])
        value_range = value_range or "unbounded"
    else:
        if len(data) < 1:
            raise ValueError("training set is empty")
        shape = data[0].shape
        value_range = value_range or data[0].value_range
        if any(img.shape != shape for img in data):
            raise ValueError("all training images must share one shape")
        X = np.stack([img.data for img in data])
    n, D = X.shape

    affine = cfg.map_kind == "affine"
    if psi is None:
        if affine:
            raise ValueError("affine maps require a feature extractor")
        F = np.zeros((n, 1))
        d_f = 1
    else:
        F = psi.features_matrix(X)
        d_f = F.shape[1]

    rng = SeededRng(cfg.seed, stream_id=1)
    state = _TrainState(cfg.K, D, d_f, affine)
    if cfg.init_scale > 0:
        # Random init spreads energy across all of R^D.  Starting from zero
        # instead confines every iterate to the span of the (distorted)
        # training images, exactly where data interference is largest.
        state.bias = (
            cfg.init_scale
            / math.sqrt(D)
            * SeededRng(cfg.seed, stream_id=3).generator.standard_normal((cfg.K, D))
        )
    R2 = feasible_ball_radius(cfg, D) ** 2

    mean_sq = float(np.mean(np.sum(X**2, axis=1)))
    base_lr = cfg.learning_rate * D / max(mean_sq, 1e-12)
    # keep the step stable against the penalty curvature 2*beta_theory
    base_lr = min(base_lr, 0.25 / cfg.beta_theory(D))
    # ... and against the data-term curvature, bounded by 1/4 (max of V'')
    # times the top eigenvalue of the empirical second moment X^T X / n
    base_lr = min(base_lr, 1.0 / (0.25 * _top_eigenvalue(X) + 1e-12))
    total_steps = cfg.epochs * max(1, math.ceil(n / cfg.batch_size))
    step = 0
    log_rows = []
    # Polyak tail average over the final epoch damps the SGD noise floor
    avg_bias = np.zeros_like(state.bias)
    avg_lin = np.zeros_like(state.lin) if affine else None
    avg_count = 0

    for epoch in range(cfg.epochs):
        order = rng.generator.permutation(n)
        epoch_loss = 0.0
        epoch_pen = 0.0
        nb = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            Xb = X[idx]
            Fb = F[idx]
            M = rng.generator.integers(0, 2, size=(idx.size, cfg.K)) * 2.0 - 1.0
            spec = distortions.sample_channel(cfg.distortion_pool, rng)
            total, dloss, pen, g_bias, g_lin = minibatch_loss_and_grad(
                state, Xb, Fb, M, cfg.loss, cfg.beta_alg, spec, shape, rng
            )
            if not np.isfinite(total):
                raise FloatingPointError(
                    f"non-finite loss at step {step} (lr={base_lr:g})"
                )
            if cfg.lr_schedule == "cosine":
                lr = base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            else:
                lr = base_lr
            state.v_bias = cfg.momentum * state.v_bias - lr * g_bias
            state.bias += state.v_bias
            if affine:
                state.v_lin = cfg.momentum * state.v_lin - lr * g_lin
                state.lin += state.v_lin
            if not affine:
                # project the iterate back onto the feasible ball
                total_sq = float(np.sum(state.bias**2))
                if total_sq > R2:
                    state.bias *= math.sqrt(R2 / total_sq)
            if epoch == cfg.epochs - 1:
                avg_bias += state.bias
                if affine:
                    avg_lin += state.lin
                avg_count += 1
            epoch_loss += total
            epoch_pen += pen
            nb += 1
            step += 1
        norms = (
            np.sum(state.bias**2, axis=1)
            if not affine
            else np.sum(np.mean(state.watermarks(F), axis=0) ** 2, axis=1)
        )
        log_rows.append(
            {
                "epoch": epoch,
                "mean_loss": epoch_loss / nb,
                "penalty": epoch_pen / nb,
                "min_norm_sq": float(norms.min()),
                "max_norm_sq": float(norms.max()),
            }
        )

    if avg_count:
        state.bias = avg_bias / avg_count
        if affine:
            state.lin = avg_lin / avg_count

    # Deterministic polish on the identity channel removes the SGD noise
    # floor.  Messages are enumerated exactly when 2^K is feasible;
    # otherwise the Gaussian cross-talk objective stands in.
    if cfg.polish_steps > 0 and not affine:
        mode = "exact" if cfg.K <= losses_mod.EXHAUSTIVE_K_MAX else "gaussian"
        state.bias = _polish(
            state.bias, X, cfg.loss, cfg.beta_theory(D), cfg.polish_steps,
            mode=mode,
        )

    # dataset-level average of the frozen per-bit maps
    if affine:
        vectors = state.bias + np.einsum("kdf,f->kd", state.lin, F.mean(axis=0))
    else:
        vectors = state.bias.copy()
    total_sq = float(np.sum(vectors**2))
    if total_sq > R2 * (1 + 1e-9):
        vectors *= math.sqrt(R2 / total_sq)

    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(log_rows[0]))
            writer.writeheader()
            writer.writerows(log_rows)

    ws = WatermarkSet(
        vectors, shape, value_range=value_range, config_digest=cfg.digest()
    )
    ws.training_log = log_rows
    return ws
