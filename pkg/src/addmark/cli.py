"""Command-line interface: train, embed, detect/decode, calibrate, eval,
theory-check, sweep, bench.

Exit codes: 0 success, 1 verification/check failure, 2 usage or input error.
Machine-readable outputs are JSON; tabular sweeps are CSV.  Every
randomized path accepts --seed.
"""

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from addmark import codec, distortions, lowdim, metrics, theory, trainer
from addmark.losses import MarginLoss, PopulationCurve, solve_r_star
from addmark.tensor import (
    Message,
    SeededRng,
    psnr,
    read_image,
    sample_uniform_message,
    value_range_max,
    write_image,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2

IMAGE_EXTS = (".png", ".ppm", ".addt")


class CliError(Exception):
    """Usage/input error -> exit 2."""


def _load_config(path, overrides):
    cfg = {}
    if path:
        with open(path) as fh:
            cfg = json.load(fh)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def _echo_config(name, cfg):
    print(f"[{name}] effective config: {json.dumps(cfg, sort_keys=True)}")


def _load_unit_image(path):
    """Watermarks operate in the unit range; 8-bit formats are rescaled.
    Raw tensors keep their declared range (unbounded data is already in
    watermark scale, just unclipped)."""
    img = read_image(path)
    return img.to_unit() if img.value_range == "byte" else img


def _read_image_dir(data_dir):
    d = Path(data_dir)
    if not d.is_dir():
        raise CliError(f"no such directory: {data_dir}")
    paths = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTS)
    if not paths:
        raise CliError(f"no readable images in {data_dir}")
    images = [_load_unit_image(p) for p in paths]
    shape = images[0].shape
    if any(img.shape != shape for img in images):
        raise CliError("training images have mixed shapes")
    return images


def _parse_message(spec, K, seed):
    if spec == "--random" or spec == "random":
        return sample_uniform_message(K, SeededRng(seed, stream_id=7))
    try:
        m = Message.from_string(spec)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    if m.K != K:
        raise CliError(f"message has {m.K} bits, watermark expects {K}")
    return m


def cmd_train(args):
    images = _read_image_dir(args.data_dir)
    raw = _load_config(
        args.config,
        {
            "K": args.bits,
            "seed": args.seed,
            "epochs": args.epochs,
            "beta_alg": args.beta,
        },
    )
    raw.setdefault("K", 16)
    raw.setdefault("beta_alg", 1000.0)
    cfg = trainer.TrainConfig.from_dict(raw)
    _echo_config("train", cfg.to_dict())
    log_path = args.log or (str(args.out) + ".log.csv")
    w = trainer.train(images, cfg, log_path=log_path)
    w.save(
        args.out,
        extra_header={
            "loss": cfg.loss.kind,
            "beta_alg": cfg.beta_alg,
            "seed": cfg.seed,
        },
    )
    print(f"[train] wrote {args.out} (K={w.K}, D={w.D}); log at {log_path}")
    return EXIT_OK


def cmd_embed(args):
    x = _load_unit_image(args.image_in)
    w = trainer.WatermarkSet.load(args.watermark)
    if x.shape != w.shape:
        raise CliError(f"image shape {x.shape} != watermark shape {w.shape}")
    m = _parse_message(args.message, w.K, args.seed)
    clip_for_display = not str(args.image_out).lower().endswith(".addt")
    xw = codec.embed(x, m, w, clip=clip_for_display)
    write_image(args.image_out, xw, clip=clip_for_display)
    quality = psnr(x, xw, value_range_max(x.value_range))
    print(f"[embed] message={m.to_string()} psnr={quality if np.isfinite(quality) else 'inf'}")
    return EXIT_OK


def _resolve_threshold(args, w, dictionary):
    if args.threshold is not None:
        return float(args.threshold)
    if args.calibration_dir is None:
        raise CliError("provide --threshold or --alpha with --calibration-dir")
    images = _read_image_dir(args.calibration_dir)
    scores = []
    for img in images:
        gamma = codec.inner_products(img, w)
        if dictionary is not None:
            s, _ = codec.statistic_S_dict(gamma, dictionary)
        else:
            s = codec.statistic_S(gamma)
        scores.append(s)
    return codec.calibrate_threshold(scores, args.alpha)


def cmd_detect(args):
    x = _load_unit_image(args.image_in)
    w = trainer.WatermarkSet.load(args.watermark)
    dictionary = None
    if args.dictionary:
        dictionary = codec.Dictionary.load(args.dictionary)
        if dictionary.K != w.K:
            raise CliError(
                f"dictionary K={dictionary.K} does not match watermark K={w.K}"
            )
    threshold = _resolve_threshold(args, w, dictionary)
    report = codec.detect_and_decode(x, w, threshold, dictionary)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_calibrate(args):
    w = trainer.WatermarkSet.load(args.watermark)
    images = _read_image_dir(args.calibration_dir)
    dictionary = codec.Dictionary.load(args.dictionary) if args.dictionary else None
    scores = []
    for img in images:
        gamma = codec.inner_products(img, w)
        if dictionary is not None:
            s, _ = codec.statistic_S_dict(gamma, dictionary)
        else:
            s = codec.statistic_S(gamma)
        scores.append(s)
    threshold = codec.calibrate_threshold(scores, args.alpha)
    out = {"alpha": args.alpha, "threshold": threshold, "n_scores": len(scores)}
    print(json.dumps(out))
    if args.out:
        Path(args.out).write_text(json.dumps(out))
    return EXIT_OK


def cmd_eval(args):
    w = trainer.WatermarkSet.load(args.watermark)
    images = _read_image_dir(args.data_dir)
    rng = SeededRng(args.seed)
    p, by_kind, overall = theory.evaluate_watermark(w, images, rng)
    out = {"psnr": p, "bit_accuracy": by_kind, "avg_bit_accuracy": overall}
    print(json.dumps(out, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_theory_check(args):
    raw = _load_config(args.config, {"seed": args.seed})
    cfg = {
        "D": 128,
        "d": 8,
        "K": 8,
        "latent_scale": 4.0,
        "sigma_eps": 0.3,
        "loss": "hinge",
        "beta_theory": 0.05,
        "n": 10000,
        "epochs": 40,
        "batch_size": 256,
        "learning_rate": 0.05,
        "seed": 0,
        "alpha": 0.05,
        "detection_trials": 20000,
        "oracle_only": False,
        "leak_tol": 0.15,
        "cos_tol": 0.15,
        "radius_tol": 0.20,
    }
    cfg.update(raw)
    _echo_config("theory-check", cfg)
    rng = SeededRng(cfg["seed"])
    model = lowdim.LowDimModel.random(
        cfg["D"], cfg["d"], cfg["latent_scale"], cfg["sigma_eps"], rng.spawn(1)
    )
    loss = MarginLoss(cfg["loss"])
    degenerate = cfg["beta_theory"] > cfg["K"] * loss.lipschitz
    if degenerate:
        curve, r_star = None, 0.0  # the zero watermark is the unique minimizer
    else:
        curve = PopulationCurve(loss, cfg["sigma_eps"], cfg["beta_theory"])
        r_star, _ = solve_r_star(curve)
    failures = []

    if cfg["oracle_only"]:
        if degenerate:
            raise CliError("oracle_only needs a nontrivial minimizer; lower beta")
        w = codec.oracle_watermark(model, r_star, cfg["K"])
        geo = theory.verify_geometry(w, model, curve)
        for name, val, tol in (
            ("oracle_leak", geo.max_subspace_leak, 1e-9),
            ("oracle_cos", geo.max_pairwise_cos, 1e-9),
            ("oracle_radius", geo.radius_error, 1e-9),
        ):
            status = "PASS" if val <= tol else "FAIL"
            print(f"[theory-check] {name}: {val:.3e} (tol {tol:g}) {status}")
            if val > tol:
                failures.append(name)
    else:
        train_cfg = trainer.TrainConfig(
            K=cfg["K"],
            beta_alg=cfg["beta_theory"] * cfg["D"],
            loss=cfg["loss"],
            epochs=cfg["epochs"],
            batch_size=cfg["batch_size"],
            learning_rate=cfg["learning_rate"],
            seed=cfg["seed"],
        )
        X = model.sample_matrix(cfg["n"], rng.spawn(2))
        w = trainer.train(X, train_cfg)
        if degenerate:
            norms = np.sqrt(w.norms_squared())
            val = float(norms.max())
            status = "PASS" if val <= 1e-3 else "FAIL"
            print(
                f"[theory-check] degenerate_norms: max ||w_k||={val:.3e} "
                f"(tol 1e-3) {status}"
            )
            if val > 1e-3:
                failures.append("degenerate_norms")
            print(
                "[theory-check] detection checks skipped: beta exceeds K*L, "
                "trained watermark is trivial by design"
            )
        else:
            geo = theory.verify_geometry(w, model, curve, n=cfg["n"])
            norms = np.sqrt(np.maximum(w.norms_squared(), 1e-300))
            leak_rel = geo.max_subspace_leak
            checks = [
                ("subspace_leak", leak_rel, cfg["leak_tol"]),
                ("pairwise_cos", geo.max_pairwise_cos, cfg["cos_tol"]),
                ("radius_error", geo.radius_error, cfg["radius_tol"]),
            ]
            for name, val, tol in checks:
                status = "PASS" if val <= tol else "FAIL"
                print(f"[theory-check] {name}: {val:.4f} (tol {tol:g}) {status}")
                if val > tol:
                    failures.append(name)
            nontrivial = geo.min_norm_sq >= geo.r_star / 2
            print(
                f"[theory-check] nontriviality: min ||w_k||^2={geo.min_norm_sq:.4f} "
                f">= r_star/2={geo.r_star / 2:.4f} "
                f"{'PASS' if nontrivial else 'FAIL'}"
            )
            if not nontrivial:
                failures.append("nontriviality")
            print(f"[theory-check] eps_n(delta=0.05) = {geo.eps_n_delta:.4f}")
            det = theory.verify_detection(
                w, model, cfg["alpha"], cfg["detection_trials"], rng.spawn(3)
            )
            fpr_ok = abs(det.empirical_FPR - cfg["alpha"]) <= 3 * np.sqrt(
                cfg["alpha"] * (1 - cfg["alpha"]) / cfg["detection_trials"]
            ) + 1e-9
            print(
                f"[theory-check] fpr: {det.empirical_FPR:.4f} at alpha "
                f"{cfg['alpha']} {'PASS' if fpr_ok else 'FAIL'}"
            )
            if not fpr_ok:
                failures.append("fpr")
            ba_ok = abs(det.empirical_BA - det.predicted_BA) <= 0.02
            print(
                f"[theory-check] bit_accuracy: empirical {det.empirical_BA:.4f} "
                f"vs predicted {det.predicted_BA:.4f} {'PASS' if ba_ok else 'FAIL'}"
            )
            if not ba_ok:
                failures.append("bit_accuracy")

    report = {"r_star": r_star, "failures": failures}
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    if failures:
        print(f"[theory-check] FAILED: {', '.join(failures)}")
        return EXIT_CHECK_FAILED
    print("[theory-check] all checks passed")
    return EXIT_OK


def cmd_sweep(args):
    images = _read_image_dir(args.data_dir)
    raw = _load_config(args.config, {"seed": args.seed})
    base = trainer.TrainConfig.from_dict(
        {k: v for k, v in raw.items() if k not in ("beta_grid", "n_grid")}
    )
    rng = SeededRng(base.seed, stream_id=42)
    grid = [float(v) for v in args.grid.split(",")]
    if args.parameter == "beta":
        rows = theory.sweep_beta(grid, images, base, rng, out_csv=args.out)
    else:
        rows = theory.sweep_n(grid, images, base, rng, out_csv=args.out)
    for row in rows:
        print(json.dumps(row))
    return EXIT_OK


def cmd_bench(args):
    images = _read_image_dir(args.data_dir)
    w = trainer.WatermarkSet.load(args.watermark)
    if len(images) < 64:
        raise CliError(f"bench needs at least 64 images, got {len(images)}")
    rng = SeededRng(args.seed)
    batch = 64
    embed_times, decode_times = [], []
    store = []
    for start in range(0, len(images) - len(images) % batch, batch):
        chunk = images[start : start + batch]
        t0 = time.perf_counter()
        for img in chunk:
            m = sample_uniform_message(w.K, rng)
            store.append(codec.embed(img, m, w, clip=False))
        embed_times.append((time.perf_counter() - t0) / batch * 1e3)
    for start in range(0, len(store) - len(store) % batch, batch):
        chunk = store[start : start + batch]
        t0 = time.perf_counter()
        for img in chunk:
            codec.decode_sign(codec.inner_products(img, w))
        decode_times.append((time.perf_counter() - t0) / batch * 1e3)

    def stats(ts):
        ts = np.asarray(ts)
        se = ts.std(ddof=1) / np.sqrt(ts.size) if ts.size > 1 else 0.0
        return float(ts.mean()), float(se)

    em, ese = stats(embed_times)
    dm, dse = stats(decode_times)
    print(f"embed  : {em:.3f} +- {ese:.3f} ms/image")
    print(f"decode : {dm:.3f} +- {dse:.3f} ms/image")
    if args.out:
        Path(args.out).write_text(
            json.dumps({"embed_ms": em, "embed_se": ese,
                        "decode_ms": dm, "decode_se": dse})
        )
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(
        prog="addmark", description="Additive multi-bit image watermarking."
    )
    p.add_argument("--threads", type=int,
                   default=int(os.environ.get("ADDMARK_THREADS", "0")),
                   help="worker threads (0 = library default)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a watermark from an image directory")
    t.add_argument("data_dir")
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--bits", type=int)
    t.add_argument("--beta", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--log")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", help="embed a message into an image")
    e.add_argument("image_in")
    e.add_argument("--watermark", required=True)
    e.add_argument("--message", required=True,
                   help="'+'/'-' or '1'/'0' string, or 'random'")
    e.add_argument("--out", dest="image_out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_embed)

    for name in ("detect", "decode"):
        d = sub.add_parser(name, help="detect and decode a watermark")
        d.add_argument("image_in")
        d.add_argument("--watermark", required=True)
        d.add_argument("--dictionary")
        d.add_argument("--threshold", type=float)
        d.add_argument("--alpha", type=float, default=0.05)
        d.add_argument("--calibration-dir")
        d.add_argument("--out")
        d.set_defaults(func=cmd_detect)

    c = sub.add_parser("calibrate", help="calibrate a detection threshold")
    c.add_argument("calibration_dir")
    c.add_argument("--watermark", required=True)
    c.add_argument("--alpha", type=float, default=0.05)
    c.add_argument("--dictionary")
    c.add_argument("--out")
    c.set_defaults(func=cmd_calibrate)

    v = sub.add_parser("eval", help="distortion-averaged evaluation")
    v.add_argument("data_dir")
    v.add_argument("--watermark", required=True)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out")
    v.set_defaults(func=cmd_eval)

    th = sub.add_parser("theory-check",
                        help="run the theory verification harness (CI gate)")
    th.add_argument("--config")
    th.add_argument("--seed", type=int)
    th.add_argument("--out")
    th.set_defaults(func=cmd_theory_check)

    s = sub.add_parser("sweep", help="beta/n trade-off sweep")
    s.add_argument("data_dir")
    s.add_argument("parameter", choices=("beta", "n"))
    s.add_argument("grid", help="comma-separated values")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    b = sub.add_parser("bench", help="embed/decode timing (batch of 64)")
    b.add_argument("data_dir")
    b.add_argument("--watermark", required=True)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        if getattr(args, "threads", 0) > 0:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
