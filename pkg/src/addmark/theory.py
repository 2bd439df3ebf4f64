"""Verification harness: geometry and detection diagnostics for trained
watermarks under the Gaussian low-dimensional data model, trade-off sweeps,
dictionary generation, and synthetic image generation."""

import csv
import json
import math

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.stats import norm

from addmark import codec, distortions, metrics, trainer
from addmark.losses import MarginLoss, PopulationCurve, solve_r_star
from addmark.tensor import ImageTensor, Message, SeededRng, psnr, value_range_max


class TheoryReport:
    """Diagnostics comparing a watermark against its population predictions."""

    FIELDS = (
        "r_star",
        "mu",
        "sigma",
        "max_subspace_leak",
        "max_pairwise_cos",
        "radius_error",
        "min_norm_sq",
        "eps_n_delta",
        "empirical_BA",
        "predicted_BA",
        "empirical_FPR",
        "empirical_TPR",
        "threshold",
    )

    def __init__(self, **kwargs):
        for f in self.FIELDS:
            setattr(self, f, kwargs.pop(f, None))
        if kwargs:
            raise TypeError(f"unknown report fields: {sorted(kwargs)}")

    def to_dict(self):
        return {f: getattr(self, f) for f in self.FIELDS}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def verify_geometry(w, model, curve, n=None, delta=0.05):
    """Geometry diagnostics: subspace leak, pairwise cosines, and radius
    error against the independent 1-D curve minimizer."""
    if w.D != model.D:
        raise ValueError("watermark and model dimensions disagree")
    r_star, _ = solve_r_star(curve)
    V = w.vectors
    norms = np.sqrt(np.sum(V**2, axis=1))
    leak = np.linalg.norm(model.project_onto_U(V), axis=1)
    max_leak = float((leak / np.maximum(norms, 1e-300)).max())
    cos = (V @ V.T) / np.outer(np.maximum(norms, 1e-300), np.maximum(norms, 1e-300))
    np.fill_diagonal(cos, 0.0)
    max_cos = float(np.abs(cos).max())
    radius_error = float(np.abs(norms**2 - r_star).max() / r_star)
    eps = None
    if n is not None:
        R = trainer.feasible_ball_radius(
            _CurveConfigShim(w.K, curve), w.D
        )
        eps = trainer.uniform_deviation_bound(
            n, delta, w.K, curve.loss.lipschitz, R, model.trace_Sigma_X()
        )
    return TheoryReport(
        r_star=r_star,
        mu=r_star,
        sigma=math.sqrt(r_star) * model.sigma_eps,
        max_subspace_leak=max_leak,
        max_pairwise_cos=max_cos,
        radius_error=radius_error,
        min_norm_sq=float((norms**2).min()),
        eps_n_delta=eps,
    )


class _CurveConfigShim:
    """Adapter exposing (K, loss, beta_theory) for feasible_ball_radius."""

    def __init__(self, K, curve):
        self.K = K
        self.loss = curve.loss
        self._beta = curve.beta

    def beta_theory(self, D):
        return self._beta


def verify_detection(
    w, model, alpha, trials, rng, dictionary=None, r_star=None, message=None
):
    """Monte-Carlo detection/decoding check against the oracle predictions.

    Calibrates the S (or S_D) threshold at level alpha on an independent
    null batch, then reports empirical FPR/TPR and per-bit accuracy on
    fresh nulls and watermarked samples.
    """
    if model.sigma_eps <= 0 and r_star is None:
        raise ValueError("sigma_eps must be positive (or pass r_star)")
    K = w.K
    g_cal = rng.spawn(101)
    g_null = rng.spawn(102)
    g_pos = rng.spawn(103)
    g_msg = rng.spawn(104)

    def batch_scores(X):
        gamma = codec.inner_products_matrix(X, w)
        if dictionary is None:
            return np.sum(np.abs(gamma), axis=1), gamma
        scores = gamma @ dictionary.matrix.T
        return scores.max(axis=1), gamma

    cal_scores, _ = batch_scores(model.sample_matrix(trials, g_cal))
    threshold = codec.calibrate_threshold(cal_scores, alpha)

    null_scores, _ = batch_scores(model.sample_matrix(trials, g_null))
    fpr = float(np.mean(null_scores > threshold))

    X = model.sample_matrix(trials, g_pos)
    if message is not None:
        M = np.tile(message.bits.astype(np.float64), (trials, 1))
    elif dictionary is not None:
        idx = g_msg.generator.integers(0, len(dictionary), size=trials)
        M = dictionary.matrix[idx]
    else:
        M = g_msg.generator.integers(0, 2, size=(trials, K)) * 2.0 - 1.0
    Xw = X + M @ w.vectors
    pos_scores, gamma_pos = batch_scores(Xw)
    tpr = float(np.mean(pos_scores > threshold))

    if dictionary is None:
        decoded = np.where(gamma_pos >= 0, 1.0, -1.0)
    else:
        idx = np.argmax(gamma_pos @ dictionary.matrix.T, axis=1)
        decoded = dictionary.matrix[idx]
    ba = float(np.mean(decoded == M))

    if r_star is None:
        norms = np.sum(w.vectors**2, axis=1)
        mu = float(norms.mean())
    else:
        mu = r_star
    sigma = math.sqrt(mu) * model.sigma_eps
    predicted_ba = float(norm.cdf(mu / sigma)) if sigma > 0 else 1.0

    return TheoryReport(
        r_star=mu,
        mu=mu,
        sigma=sigma,
        empirical_BA=ba,
        predicted_BA=predicted_ba,
        empirical_FPR=fpr,
        empirical_TPR=tpr,
        threshold=float(threshold),
    )


def generate_dictionary(K, size, target_d_min, rng, max_tries=200000):
    """Messages with pairwise Hamming distance >= target, with one pair
    placed at exactly the target so d_min hits it."""
    if size < 2:
        raise ValueError("dictionary generation needs size >= 2")
    g = rng.generator
    first = g.integers(0, 2, size=K) * 2 - 1
    second = first.copy()
    flip = g.choice(K, size=target_d_min, replace=False)
    second[flip] *= -1
    rows = [first, second]
    tries = 0
    while len(rows) < size:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(
                f"could not place {size} messages at d_min {target_d_min} in "
                f"K={K} bits"
            )
        cand = g.integers(0, 2, size=K) * 2 - 1
        dists = [(K - int(cand @ r)) // 2 for r in rows]
        if min(dists) >= target_d_min:
            rows.append(cand)
    return codec.Dictionary([Message(r) for r in rows])


def make_smooth_images(n, shape, rng, smoothing=2.0, mean=0.5, std=0.18):
    """Smoothed Gaussian random fields clipped to the unit range."""
    c, h, w = shape
    g = rng.generator
    imgs = []
    for _ in range(n):
        field = g.standard_normal((c, h, w))
        field = gaussian_filter(field, sigma=(0, smoothing, smoothing))
        field /= max(field.std(), 1e-12)
        arr = np.clip(mean + std * field, 0.0, 1.0)
        imgs.append(ImageTensor(c, h, w, arr, value_range="unit"))
    return imgs


def evaluate_watermark(w, images, rng, pool=None, trials_per_image=1):
    """Distortion-averaged bit accuracy and PSNR on a held-out image list.

    Returns (mean_psnr, {kind: bit_accuracy}, overall_mean_ba).  The
    average includes the identity ("none") setting, matching the reporting
    convention of distortion sweeps.
    """
    pool = pool if pool is not None else distortions.default_pool()
    peak = value_range_max(images[0].value_range)
    g_msg = rng.spawn(301)
    g_dist = rng.spawn(302)
    psnrs = []
    ba_by_kind = {spec.kind: [] for spec in pool}
    for img in images:
        for _ in range(trials_per_image):
            bits = g_msg.generator.integers(0, 2, size=w.K) * 2 - 1
            m = Message(bits)
            xw = codec.embed(img, m, w, clip=False)
            psnrs.append(psnr(img, xw, peak))
            for spec in pool:
                xd = distortions.apply(spec, xw, g_dist)
                decoded = codec.decode_sign(codec.inner_products(xd, w))
                ba_by_kind[spec.kind].append(metrics.bit_accuracy(decoded, m))
    ba_mean = {k: float(np.mean(v)) for k, v in ba_by_kind.items()}
    overall = float(np.mean(list(ba_mean.values())))
    return float(np.mean(psnrs)), ba_mean, overall


def sweep_beta(beta_grid, images, base_cfg, rng, out_csv=None, seeds=(0, 1, 2)):
    """Retrain per beta value and record (beta, median PSNR, median avg BA)."""
    return _sweep("beta_alg", beta_grid, images, base_cfg, rng, out_csv, seeds)


def sweep_n(n_grid, images, base_cfg, rng, out_csv=None, seeds=(0, 1, 2)):
    """Retrain per training-set size and record (n, median PSNR, median avg BA)."""
    return _sweep("n", n_grid, images, base_cfg, rng, out_csv, seeds)


def _sweep(param, grid, images, base_cfg, rng, out_csv, seeds):
    if not list(grid):
        raise ValueError("sweep grid is empty")
    rows = []
    eval_images = images[: min(len(images), 128)]
    for value in grid:
        psnrs, bas = [], []
        for seed in seeds:
            d = base_cfg.to_dict()
            d["seed"] = seed
            if param == "beta_alg":
                d["beta_alg"] = value
                train_imgs = images
            else:
                train_imgs = images[: int(value)]
            cfg = trainer.TrainConfig.from_dict(d)
            w = trainer.train(train_imgs, cfg)
            p, _, ba = evaluate_watermark(
                w, eval_images, rng.spawn(hash((param, value, seed)) % (2**31)),
                pool=cfg.distortion_pool, trials_per_image=2,
            )
            psnrs.append(p)
            bas.append(ba)
        rows.append(
            {
                "parameter": value,
                "psnr": float(np.median(psnrs)),
                "avg_bit_accuracy": float(np.median(bas)),
            }
        )
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return rows
