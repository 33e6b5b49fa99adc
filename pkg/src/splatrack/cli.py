"""Command-line entry point: ``splatrack {simulate,track,evaluate,render}``.

Every command reads an optional sectioned config file (``--config``); flags
given on the command line override file values.  Exit codes: 0 success,
1 usage or I/O error, 2 tracking finished with divergent keyframes.
"""

import argparse
import configparser
import dataclasses
import json
import logging
import os
import shutil
import sys

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from . import __version__
from .evaluation import TrajectoryFormatError, align_first_pose, ate, load_tum, save_tum
from .events import EventFormatError, FrontendConfig, parse_events, write_events
from .gaussian_map import (EmptyMapError, MapFormatError, SceneSpec, ShConfigError, load_ply,
                           make_synthetic_map, save_ply)
from .lie import invert, make_transform
from .motion import MotionState
from .rasterizer import CameraIntrinsics, render, set_threads
from .simulator import SimConfig, make_trajectory, simulate_events
from .tracker import TrackerConfig, prepare_target, render_delta_Ir, track_sequence

log = logging.getLogger("splatrack")

EXIT_OK, EXIT_ERROR, EXIT_DIVERGED = 0, 1, 2


class UsageError(Exception):
    pass


# -- configuration -------------------------------------------------------------------

def _read_config(path):
    parser = configparser.ConfigParser()
    if path is not None:
        if not os.path.isfile(path):
            raise UsageError(f"config file not found: {path}")
        parser.read(path)
    return parser


def _section(parser, name):
    return parser[name] if parser.has_section(name) else {}


def _typed_fields(cls, section):
    """Convert ``section`` entries to the field types of dataclass ``cls``."""
    out = {}
    for f in dataclasses.fields(cls):
        if f.name not in section:
            continue
        raw = section[f.name]
        kind = f.type if isinstance(f.type, type) else type(f.default)
        try:
            if kind is bool:
                out[f.name] = str(raw).strip().lower() in ("1", "true", "yes", "on")
            elif str(raw).strip().lower() == "none":
                out[f.name] = None
            else:
                out[f.name] = kind(raw)
        except ValueError:
            raise UsageError(f"bad value for {f.name}: {raw!r}") from None
    unknown = set(section) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise UsageError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    return out


def _intrinsics(parser):
    sec = _section(parser, "camera")
    try:
        return CameraIntrinsics(float(sec.get("fx", 100.0)), float(sec.get("fy", 100.0)),
                                float(sec.get("cx", 63.5)), float(sec.get("cy", 47.5)),
                                int(sec.get("width", 128)), int(sec.get("height", 96)))
    except ValueError as exc:
        raise UsageError(f"[camera]: {exc}") from None


def _path(parser, key, override=None, must_exist=True):
    value = override if override is not None else _section(parser, "paths").get(key)
    if value is None:
        raise UsageError(f"no {key} path given (flag or [paths] {key})")
    if must_exist and not os.path.exists(value):
        raise UsageError(f"{key} path does not exist: {value}")
    return value


def _tracker_config(parser, overrides=None):
    fields = _typed_fields(TrackerConfig, _section(parser, "tracker"))
    fields.update(overrides or {})
    try:
        return TrackerConfig(**fields)
    except ValueError as exc:
        raise UsageError(f"[tracker]: {exc}") from None


def _parse_pose(text):
    """``tx ty tz qx qy qz qw`` (camera-to-world, TUM order) -> T_cw."""
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) != 7:
        raise UsageError("pose needs 7 numbers: tx ty tz qx qy qz qw")
    q = np.array(vals[3:])
    if np.linalg.norm(q) == 0:
        raise UsageError("pose quaternion is zero")
    R_wc = Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()
    return invert(make_transform(R_wc, vals[:3]))


# -- image output -----------------------------------------------------------------

def _to_u8(image, lo, hi):
    scaled = (np.asarray(image, dtype=np.float64) - lo) / max(hi - lo, 1e-12)
    return np.round(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(image, path, lo=0.0, hi=1.0):
    """Write a grayscale PNG or PGM (chosen by extension); bytes depend only on pixels."""
    ext = os.path.splitext(path)[1].lower()
    if ext not in (".png", ".pgm"):
        raise UsageError(f"unsupported image format {ext!r}; use .png or .pgm")
    Image.fromarray(_to_u8(image, lo, hi), mode="L").save(path, format="PNG" if ext == ".png" else "PPM")


def save_signed_image(values, path):
    """Symmetric scaling: zero maps to mid-gray."""
    m = float(np.max(np.abs(values))) if np.size(values) else 0.0
    m = m if m > 0 else 1.0
    save_image(values, path, -m, m)


# -- commands ---------------------------------------------------------------------

def cmd_simulate(args):
    parser = _read_config(args.config)
    intr = _intrinsics(parser)
    out = args.out or _section(parser, "paths").get("output")
    if out is None:
        raise UsageError("no output directory (--out or [paths] output)")
    os.makedirs(out, exist_ok=True)
    seed = args.seed if args.seed is not None else int(_section(parser, "run").get("seed", 0))

    map_src = args.map or _section(parser, "paths").get("map")
    if map_src:
        gmap = load_ply(_path(parser, "map", args.map))
        shutil.copyfile(map_src, os.path.join(out, "map.ply"))
    else:
        spec = SceneSpec.from_config(_section(parser, "scene")) if parser.has_section("scene") else SceneSpec()
        gmap = make_synthetic_map(spec)
        save_ply(gmap, os.path.join(out, "map.ply"))

    tsec = dict(_section(parser, "trajectory"))
    kind = tsec.pop("kind", "shake")
    duration = float(tsec.pop("duration", 3.0))
    rate = float(tsec.pop("rate", 1000.0))
    params = {}
    for key, raw in tsec.items():
        nums = [float(v) for v in raw.replace(",", " ").split()]
        params[key] = nums[0] if len(nums) == 1 else nums
    if kind == "shake":
        params.setdefault("seed", seed)
        params["seed"] = int(params["seed"])
    if "components" in params:
        params["components"] = int(params["components"])
    try:
        traj = make_trajectory(kind, duration, rate, **params)
        sim_fields = _typed_fields(SimConfig, _section(parser, "sim"))
        sim_fields.setdefault("seed", seed)
        cfg = SimConfig(**sim_fields)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = simulate_events(gmap, traj, intr, cfg)
    write_events(result.events, os.path.join(out, "events.txt"))
    save_tum(traj, os.path.join(out, "groundtruth.txt"))

    run = configparser.ConfigParser()
    run["paths"] = {"map": "map.ply", "events": "events.txt", "groundtruth": "groundtruth.txt"}
    run["camera"] = {k: repr(getattr(intr, k)) for k in ("fx", "fy", "cx", "cy", "width", "height")}
    for name in ("frontend", "tracker", "run"):
        # carried over so the bundle can be tracked as-is
        if parser.has_section(name):
            run[name] = dict(parser[name])
    with open(os.path.join(out, "run.ini"), "w") as fh:
        run.write(fh)
    print(f"simulated {len(result.events)} events from {result.frame_count} frames into {out}")
    return EXIT_OK


def _relative_to(base, path):
    if path is None or os.path.isabs(path) or base is None:
        return path
    return os.path.join(os.path.dirname(os.path.abspath(base)), path)


def cmd_track(args):
    parser = _read_config(args.config)
    paths = _section(parser, "paths")
    map_path = _path(parser, "map", args.map or _relative_to(args.config, paths.get("map")))
    ev_path = _path(parser, "events", args.events or _relative_to(args.config, paths.get("events")))
    gt_arg = args.groundtruth or _relative_to(args.config, paths.get("groundtruth"))
    if gt_arg is not None and not os.path.exists(gt_arg):
        raise UsageError(f"groundtruth path does not exist: {gt_arg}")
    out = args.out or paths.get("output")
    if out is None:
        raise UsageError("no output directory (--out or [paths] output)")
    os.makedirs(out, exist_ok=True)

    intr = _intrinsics(parser)
    fe = _typed_fields(FrontendConfig, _section(parser, "frontend"))
    fe.update(width=intr.width, height=intr.height)
    frontend = FrontendConfig(**fe)
    overrides = {}
    if args.no_coarse:
        overrides["coarse"] = False
    cfg = _tracker_config(parser, overrides)

    gmap = load_ply(map_path)
    events = parse_events(ev_path, intr.width, intr.height)
    if args.sequence_fraction is not None:
        if not 0 < args.sequence_fraction <= 1:
            raise UsageError("--sequence-fraction must be in (0, 1]")
        if len(events):
            t_end = events.t[0] + args.sequence_fraction * (events.t[-1] - events.t[0])
            events = events[: int(np.searchsorted(events.t, t_end, side="right"))]
    gt = load_tum(gt_arg) if gt_arg else None

    run = _section(parser, "run")
    init_velocity = args.initial_velocity or run.get("initial_velocity", "groundtruth" if gt else "zero")
    first_tau = None
    if len(events) >= frontend.events_per_keyframe:
        chunk = events[: frontend.events_per_keyframe]
        first_tau = 0.5 * (float(chunk.t[0]) + float(chunk.t[-1]))
    if args.initial_pose:
        T0 = _parse_pose(args.initial_pose)
    elif gt is not None:
        T0 = gt.pose_at(first_tau if first_tau is not None else gt.start)
    else:
        raise UsageError("initial pose needed: --initial-pose or a ground-truth file")
    if init_velocity == "groundtruth":
        if gt is None:
            raise UsageError("initial_velocity = groundtruth needs a ground-truth file")
        v, w = gt.velocity_at(first_tau if first_tau is not None else gt.start)
    elif init_velocity == "zero":
        v, w = np.zeros(3), np.zeros(3)
        log.warning("zero initial velocity renders a zero intensity change; tracking cannot start")
    else:
        raise UsageError(f"initial_velocity must be 'groundtruth' or 'zero', not {init_velocity!r}")
    state = MotionState(T0, v, w)

    dump = args.dump_images
    if dump:
        os.makedirs(dump, exist_ok=True)

    diag_path = os.path.join(out, "diagnostics.jsonl")
    with open(diag_path, "w") as diag:
        def on_keyframe(record, st):
            diag.write(json.dumps(record.as_dict(), sort_keys=True) + "\n")
            if dump:
                _dump_keyframe(dump, record, st, events, frontend, gmap, intr, cfg)

        result = track_sequence(gmap, state, events, frontend, intr, cfg,
                                max_keyframes=args.max_keyframes, callback=on_keyframe)
    save_tum(result.trajectory, os.path.join(out, "trajectory.txt"))
    n_div = sum(d.divergent for d in result.diagnostics)
    print(f"tracked {len(result.trajectory)} keyframes; {n_div} divergent")
    if gt is not None and len(result.trajectory):
        try:
            print(ate(align_first_pose(result.trajectory, gt), gt))
        except ValueError as exc:
            log.warning("ATE not computed: %s", exc)
    return EXIT_DIVERGED if n_div else EXIT_OK


def _dump_keyframe(directory, record, state, events, frontend, gmap, intr, cfg):
    from .events import accumulate

    n = frontend.events_per_keyframe
    chunk = events[record.index * n:(record.index + 1) * n]
    e = accumulate(chunk, frontend.width, frontend.height)
    save_signed_image(e, os.path.join(directory, f"kf{record.index:05d}_events.png"))
    r = render_delta_Ir(gmap, state, None, record.delta_tau, intr).image.values
    save_signed_image(r, os.path.join(directory, f"kf{record.index:05d}_rendered.png"))


def cmd_evaluate(args):
    est = load_tum(args.estimate)
    gt = load_tum(args.groundtruth)
    res = ate(align_first_pose(est, gt, args.tolerance), gt, args.tolerance)
    print(res)
    if args.csv:
        res.to_csv(args.csv)
    return EXIT_OK


def cmd_render(args):
    parser = _read_config(args.config)
    intr = _intrinsics(parser)
    gmap = load_ply(_path(parser, "map", args.map))
    T_cw = _parse_pose(args.pose) if args.pose else np.eye(4)
    try:
        img = render(gmap, T_cw, intr).luma
    except EmptyMapError:
        img = np.zeros((intr.height, intr.width))
    save_image(img, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------

def _common(defaults):
    """Options accepted both before and after the subcommand."""
    common = argparse.ArgumentParser(add_help=False)
    kw = {} if defaults else {"default": argparse.SUPPRESS}
    common.add_argument("--threads", type=int, help="kernel thread count", **kw)
    common.add_argument("--seed", type=int, help="random seed", **kw)
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def build_parser():
    p = argparse.ArgumentParser(prog="splatrack", description=__doc__.splitlines()[0],
                                parents=[_common(True)])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    parent = [_common(False)]

    s = sub.add_parser("simulate", parents=parent, help="generate map, trajectory and events")
    s.add_argument("--config")
    s.add_argument("--map", help="existing PLY map instead of a synthetic scene")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("track", parents=parent, help="track an event sequence against a map")
    t.add_argument("--config")
    t.add_argument("--map")
    t.add_argument("--events")
    t.add_argument("--groundtruth")
    t.add_argument("--out")
    t.add_argument("--initial-pose", help="tx ty tz qx qy qz qw (camera to world)")
    t.add_argument("--initial-velocity", choices=("groundtruth", "zero"))
    t.add_argument("--max-keyframes", type=int)
    t.add_argument("--sequence-fraction", type=float)
    t.add_argument("--no-coarse", action="store_true", help="skip the polarity-free stage")
    t.add_argument("--dump-images", metavar="DIR")
    t.set_defaults(func=cmd_track)

    e = sub.add_parser("evaluate", parents=parent, help="ATE of an estimate against ground truth")
    e.add_argument("estimate")
    e.add_argument("groundtruth")
    e.add_argument("--tolerance", type=float, default=0.01, help="association window (s)")
    e.add_argument("--csv")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("render", parents=parent, help="render a map to a grayscale image")
    r.add_argument("--config")
    r.add_argument("--map")
    r.add_argument("--pose", help="tx ty tz qx qy qz qw (camera to world); default identity")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        set_threads(args.threads)
    if args.seed is not None:
        np.random.seed(args.seed)
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, IsADirectoryError, PermissionError, MapFormatError,
            EmptyMapError, ShConfigError, EventFormatError, TrajectoryFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
