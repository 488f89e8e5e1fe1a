"""Command-line entry point: ``fabarf <subcommand> [options] [key=value ...]``.

Exit codes: 0 success, 1 validation error (or failed verification),
2 runtime abort (non-finite values), 3 file or dataset I/O error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import encoding as enc
from . import gradcheck
from .config import Config, ConfigError, load_config, save_config
from .experiment import (evaluate, load_run_checkpoint, make_dataset, run_training,
                         sampling_config, write_eval_report)
from .optim import NonFiniteError
from .renderer import render_image
from .scene import Camera, DatasetError, load_dataset, save_dataset, to_uint8

OUT_ENV = "FABARF_OUT"
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("fabarf")


class RunAborted(RuntimeError):
    pass


def _common(p: argparse.ArgumentParser):
    p.add_argument("overrides", nargs="*", metavar="key=value",
                   help="dotted config overrides, e.g. train.iterations=500")
    p.add_argument("--config", type=Path, help="YAML config file (defaults apply otherwise)")
    p.add_argument("--seed", type=int, help="seed for this subcommand's randomness")
    p.add_argument("--deterministic", action="store_true",
                   help="single worker, wall-clock column zeroed so reruns are byte-equal")
    p.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV} or ./runs/<subcommand>)")
    p.add_argument("--workers", type=int, help="ray-evaluation threads (0 = available cores)")
    p.add_argument("-q", "--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fabarf", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="bake an analytic blob scene to a dataset directory")
    _common(p)

    p = sub.add_parser("train", help="jointly optimize field and poses on a dataset")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory (from gen-scene)")
    p.add_argument("--mode", choices=enc.MODES)
    p.add_argument("--iters", type=int)

    p = sub.add_parser("eval", help="registration and view-synthesis metrics for a checkpoint")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--refine-steps", type=int, help="test-time pose refinement steps per test view")

    p = sub.add_parser("gradcheck", help="finite-difference verification of all analytic derivatives")
    _common(p)
    p.add_argument("--trials", type=int, default=20, help="random trials per oracle")

    p = sub.add_parser("freq-response", help="per-band gains of the three encodings")
    _common(p)
    p.add_argument("--sigma-max", type=float, default=0.01, help="largest variance in the sweep")
    p.add_argument("--steps", type=int, default=11)

    p = sub.add_parser("render", help="render colour and depth images from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--view", type=int, action="append", help="train view index (repeatable; default all)")
    return ap


def _out_dir(args) -> Path:
    if args.out is not None:
        return args.out
    root = os.environ.get(OUT_ENV)
    return Path(root) / args.command if root else Path("runs") / args.command


def _config(args) -> Config:
    overrides = list(args.overrides)
    if args.seed is not None:
        key = {"gen-scene": "scene.seed"}.get(args.command, "train.seed")
        overrides.append(f"{key}={args.seed}")
    if getattr(args, "mode", None):
        overrides.append(f"train.mode={args.mode}")
    if getattr(args, "iters", None) is not None:
        overrides.append(f"train.iterations={args.iters}")
    if args.deterministic:
        overrides.append("train.workers=1")
    elif args.workers is not None:
        overrides.append(f"train.workers={args.workers}")
    return load_config(args.config, overrides)


def _echo_config(cfg: Config, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_scene(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    _echo_config(cfg, out)
    ds = make_dataset(cfg)
    manifest = save_dataset(ds, out / "dataset")
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = load_dataset(args.data)
    out = _out_dir(args)
    _echo_config(cfg, out)
    res = run_training(cfg, ds, out, wall_clock=not args.deterministic)
    print(out / "records.csv")
    if res.aborted:
        raise RunAborted(res.aborted)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    ds = load_dataset(args.data)
    ck = load_run_checkpoint(args.checkpoint)
    out = _out_dir(args)
    _echo_config(cfg, out)
    rec, views = evaluate(ck, ds, args.refine_steps, cfg)
    csv_path, summary = write_eval_report(rec, views, out, wall_clock=not args.deterministic)
    print(summary.read_text(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    results = gradcheck.run(seed, args.trials)
    print(gradcheck.format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("FAILED: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VALIDATION
    if args.trials <= 0:
        print("warning: zero trials, nothing was checked", file=sys.stderr)
    return EXIT_OK


FREQ_HEADER = ("sweep", "value", "k", "gain_plain", "gain_annealed", "gain_ipe")


def frequency_rows(L: int, sigmas, alphas, sigma_fixed: float, alpha_fixed=None):
    """Per-band gains of the three modes over a variance sweep and an alpha sweep.

    The variance sweep holds alpha at ``alpha_fixed`` (default L); the alpha
    sweep holds the variance at ``sigma_fixed``.  Rows follow FREQ_HEADER.
    """
    alpha_fixed = float(L) if alpha_fixed is None else alpha_fixed
    cfgs = [enc.EncodingConfig(L, m) for m in ("plain_pe", "annealed_pe", "integrated_pe")]
    rows = []
    for sweep, values in (("sigma", sigmas), ("alpha", alphas)):
        for v in values:
            s, a = (v, alpha_fixed) if sweep == "sigma" else (sigma_fixed, v)
            gains = [enc.frequency_response(c, diag_sigma=s, anneal=enc.AnnealState(float(a))) for c in cfgs]
            rows += [(sweep, float(v), k, *(float(g[k]) for g in gains)) for k in range(L)]
    return rows


def cmd_freq_response(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    _echo_config(cfg, out)
    L = cfg.train.L
    steps = max(args.steps, 2)
    rows = frequency_rows(L, np.linspace(0.0, args.sigma_max, steps), np.linspace(0.0, L, steps),
                          args.sigma_max / 2)
    path = out / "frequency_response.csv"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(FREQ_HEADER)
        wr.writerows((sw, repr(v), k, *(repr(g) for g in gains)) for sw, v, k, *gains in rows)
    print(path)
    return EXIT_OK


def depth_to_uint8(depth, near, far) -> np.ndarray:
    return to_uint8(np.clip((np.asarray(depth) - near) / (far - near), 0.0, 1.0))


def cmd_render(args) -> int:
    ck = load_run_checkpoint(args.checkpoint)
    cfg = ck.config
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    cam = Camera.default(cfg.scene.image_size)
    samp = sampling_config(cfg)
    poses = ck.poses()
    views = args.view if args.view else range(len(poses))
    for i in views:
        if not 0 <= i < len(poses):
            raise ConfigError(f"--view {i}: checkpoint has {len(poses)} views")
        rgb, depth = render_image(poses[i], cam.K, cam.width, cam.height, ck.model,
                                  cfg.train.encoding, samp)
        Image.fromarray(to_uint8(rgb)).save(out / f"view_{i:03d}_rgb.png")
        Image.fromarray(depth_to_uint8(depth, samp.near, samp.far)).save(out / f"view_{i:03d}_depth.png")
    print(out)
    return EXIT_OK


COMMANDS = {
    "gen-scene": cmd_gen_scene,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "freq-response": cmd_freq_response,
    "render": cmd_render,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteError, RunAborted, FloatingPointError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, ValueError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
