"""Command-line interface: simulate, reconstruct, eval, plot, train-infiller.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numerical failure.
"""

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
import yaml

from . import io as hio
from .errors import CheckpointError, HandWorldError, InvalidSpec
from .infiller import InfillerConfig, InfillerModel, InfillLossWeights, train_infiller
from .pipeline import INFILL_MODES, evaluate_outputs, reconstruct
from .scale import DepthBounds
from .sim import SceneSpec, generate, training_motions, zero_noise_spec

log = logging.getLogger("handworld")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

RECON_DEFAULTS = dict(mask=True, depth_band=True, infill="lerp", model=None, d_min=0.3, d_max=4.0, ba_iters=50)
TRAIN_DEFAULTS = dict(n_sequences=256, frames=128, base_seed=0)


class ConfigError(Exception):
    pass


def load_config(path):
    """Parse a YAML config into ``{'scene', 'reconstruct', 'infiller', 'training'}`` dicts."""
    if path is None:
        raw = {}
    else:
        text = Path(path).read_text()
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    allowed = {"scene", "reconstruct", "infiller", "training", "loss", "backend"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = {k: dict(raw.get(k) or {}) for k in ("scene", "reconstruct", "infiller", "training", "loss")}
    cfg["backend"] = raw.get("backend")
    for name, defaults in (("reconstruct", RECON_DEFAULTS), ("training", TRAIN_DEFAULTS)):
        bad = set(cfg[name]) - set(defaults)
        if bad:
            raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
        cfg[name] = {**defaults, **cfg[name]}
    bad = set(cfg["infiller"]) - {f.name for f in fields(InfillerConfig)}
    if bad:
        raise ConfigError(f"unknown keys in infiller: {sorted(bad)}")
    bad = set(cfg["loss"]) - {f.name for f in fields(InfillLossWeights)}
    if bad:
        raise ConfigError(f"unknown keys in loss: {sorted(bad)}")
    if cfg["backend"] not in (None, "numba", "numpy"):
        raise ConfigError("backend must be 'numba' or 'numpy'")
    return cfg


def _scene_spec(cfg, args):
    scene = dict(cfg["scene"])
    for key in ("seed", "frames", "fps"):
        v = getattr(args, key, None)
        if v is not None:
            scene[key] = v
    try:
        if getattr(args, "zero_noise", False):
            return zero_noise_spec(**scene).validate()
        return SceneSpec.from_dict(scene)
    except (InvalidSpec, TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args, cfg):
    spec = _scene_spec(cfg, args)
    bundle = generate(spec)
    hio.write_scene(bundle, args.out)
    n_dyn = sum(tr.is_dynamic for tr in bundle.tracks)
    print(f"seed {spec.seed}")
    print(f"frames {spec.frames} fps {spec.fps:g} alpha_true {spec.alpha_true:g}")
    print(f"tracks {len(bundle.tracks)} ({n_dyn} on the hand), hand visible in "
          f"{int(bundle.visible.sum())}/{spec.frames} frames")
    return EXIT_OK


def _recon_options(cfg, args):
    opts = dict(cfg["reconstruct"])
    if args.no_mask:
        opts["mask"] = False
    if args.no_adasm:
        opts["depth_band"] = False
    if args.infill is not None:
        opts["infill"] = args.infill
    if args.model is not None:
        opts["model"] = args.model
    if opts["infill"] not in INFILL_MODES:
        raise ConfigError(f"infill must be one of {INFILL_MODES}")
    try:
        opts["bounds"] = DepthBounds(float(opts.pop("d_min")), float(opts.pop("d_max")))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if opts["infill"] == "transformer" and not opts["model"]:
        raise ConfigError("--infill transformer needs --model")
    return opts


def cmd_reconstruct(args, cfg):
    opts = _recon_options(cfg, args)
    scene = hio.read_scene(args.scene)
    model = InfillerModel.load(opts["model"]) if opts["infill"] == "transformer" else None
    rec = reconstruct(scene, mask=opts["mask"], depth_band=opts["depth_band"], infill=opts["infill"], model=model,
                      bounds=opts["bounds"], ba_iters=int(opts["ba_iters"]), backend=cfg["backend"])
    out = Path(args.out)
    hio.write_tum(out / "cams_est.tum", rec.cams_slam)
    hio.write_motion(out / "hand_world_est.jsonl", rec.hand_world, scene.template)
    hio.atomic_write_text(out / "alpha.txt", f"{rec.alpha!r}\n")
    print(f"ba iterations {rec.ba.iterations} rms {rec.ba.final_rms_residual:.6g} px")
    print(f"alpha {rec.alpha:.9g} ({rec.scale.n_samples} samples)")
    return EXIT_OK


def read_results(results_dir):
    d = Path(results_dir)
    cams = hio.read_tum(d / "cams_est.tum")
    alpha = float((d / "alpha.txt").read_text().split()[0])
    hand, _ = hio.read_motion(d / "hand_world_est.jsonl")
    return cams, alpha, hand


def cmd_eval(args, cfg):
    scene = hio.read_scene(args.scene)
    cams, alpha, hand = read_results(args.results)
    try:
        report = evaluate_outputs(cams, alpha, hand, scene)
    except ValueError as e:
        raise OSError(f"results do not match the scene: {e}") from e
    out = Path(args.out) if args.out else Path(args.results)
    hio.atomic_write_text(out / "metrics.txt", report.to_text())
    hio.atomic_write_text(out / "metrics.json", report.to_json())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def trajectory_table(cams, alpha, hand, scene):
    """Per-frame GT and estimated camera/wrist positions, metric units."""
    est_cam = cams.t * alpha
    cols = {"frame": np.arange(len(cams))}
    for name, arr in (("gt_cam", scene.gt_cams.t), ("est_cam", est_cam),
                      ("gt_hand", scene.gt_hand_world.gamma), ("est_hand", hand.gamma)):
        for i, ax in enumerate("xyz"):
            cols[f"{name}_{ax}"] = arr[:, i]
    return cols


def format_csv(cols):
    names = list(cols)
    lines = [",".join(names)]
    n = len(cols[names[0]])
    for r in range(n):
        lines.append(",".join(str(int(cols[k][r])) if k == "frame" else f"{cols[k][r]:.9g}" for k in names))
    return "\n".join(lines) + "\n"


PROJECTIONS = {
    # maps (x, y, z) to 2-D plot coordinates
    "topdown": np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
    "oblique": np.array([[1.0, 0.0, 0.5 * np.cos(np.pi / 6)], [0.0, -1.0, 0.5 * np.sin(np.pi / 6)]]),
}
SVG_SIZE = 480.0
SVG_PAD = 24.0
STYLES = {"gt_cam": "#1f77b4", "est_cam": "#ff7f0e", "gt_hand": "#2ca02c", "est_hand": "#d62728"}


def svg_transform(points2d):
    """Shared affine map (scale, offset) from plot coordinates to SVG pixels."""
    lo = points2d.min(axis=0)
    hi = points2d.max(axis=0)
    span = float(max(np.max(hi - lo), 1e-12))
    scale = (SVG_SIZE - 2 * SVG_PAD) / span
    offset = SVG_PAD - lo * scale
    return scale, offset


def render_svg(cols, projection, title):
    P = PROJECTIONS[projection]
    series = {k: np.column_stack([cols[f"{k}_x"], cols[f"{k}_y"], cols[f"{k}_z"]]) @ P.T for k in STYLES}
    scale, offset = svg_transform(np.concatenate(list(series.values())))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE:g}" height="{SVG_SIZE:g}" '
             f'viewBox="0 0 {SVG_SIZE:g} {SVG_SIZE:g}">',
             f"<title>{escape(title)}</title>",
             f'<rect width="{SVG_SIZE:g}" height="{SVG_SIZE:g}" fill="white"/>']
    for k, color in STYLES.items():
        px = series[k] * scale + offset
        pts = " ".join(f"{x:.4f},{y:.4f}" for x, y in px)
        dash = ' stroke-dasharray="4 2"' if k.startswith("est") else ""
        parts.append(f'<polyline id="{k}" fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{pts}"/>')
    for i, (k, color) in enumerate(STYLES.items()):
        parts.append(f'<text x="8" y="{14 + 12 * i}" font-size="10" fill="{color}">{k}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(args, cfg):
    scene = hio.read_scene(args.scene)
    cams, alpha, hand = read_results(args.results)
    cols = trajectory_table(cams, alpha, hand, scene)
    out = Path(args.out)
    hio.atomic_write_text(out / "trajectories.csv", format_csv(cols))
    hio.atomic_write_text(out / "trajectory_topdown.svg", render_svg(cols, "topdown", "top-down (x, z)"))
    hio.atomic_write_text(out / "trajectory_oblique.svg", render_svg(cols, "oblique", "oblique 3-D view"))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train_infiller(args, cfg):
    icfg = dict(cfg["infiller"])
    if args.steps is not None:
        icfg["steps"] = args.steps
    if args.seed is not None:
        icfg["seed"] = args.seed
    try:
        config = InfillerConfig(**icfg)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    tr = cfg["training"]
    data = training_motions(int(tr["n_sequences"]), frames=int(tr["frames"]), base_seed=int(tr["base_seed"]))
    try:
        weights = InfillLossWeights(**cfg["loss"])
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    model = train_infiller(data, weights, config, log=log.info)
    model.save(args.out)
    print(f"final epoch loss {model.history[-1]:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="handworld", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML config (sections: scene, reconstruct, infiller, training, loss)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic scene directory")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--fps", type=float)
    s.add_argument("--zero-noise", action="store_true", help="disable every noise source")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("reconstruct", help="estimate cameras, scale and world hand motion")
    r.add_argument("--scene", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--no-mask", action="store_true", help="keep hand-region tracks in bundle adjustment")
    r.add_argument("--no-adasm", action="store_true", help="disable the depth band in scale sampling")
    r.add_argument("--infill", choices=INFILL_MODES)
    r.add_argument("--model", help="infiller checkpoint for --infill transformer")
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval", help="metric report of results against a scene")
    e.add_argument("--results", required=True)
    e.add_argument("--scene", required=True)
    e.add_argument("--out", help="report directory (default: results dir)")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="trajectory CSV and SVG figures")
    pl.add_argument("--results", required=True)
    pl.add_argument("--scene", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)

    t = sub.add_parser("train-infiller", help="train the gap infiller on simulator motions")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train_infiller)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except HandWorldError as e:
        print(f"numerical failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
