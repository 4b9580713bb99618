"""Command line entry point.

    odom simulate|encode|train|infer|eval --config <path> [--out <dir>]
         [--seed <u64>] [--step <n>] [--threads <n>]

The config file holds ``key = value`` lines. Flags override file values,
which override the defaults in ``SETTINGS``. The resolved configuration is
written to ``<out>/<command>.cfg``. Datasets use the KITTI odometry layout::

    <data>/sequences/<seq>/velodyne/000000.bin
    <data>/sequences/<seq>/calib.txt
    <data>/poses/<seq>.txt

Exit status: 0 on success, 1 on usage errors, 2 on data errors.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import set_threads
from .core import Trajectory, euler_to_matrix, integrate, invert_matrix
from .data import kitti, sim
from .encoder import GridSpec, dump_frame, encode
from .errors import DataError, EmptyFrameError, EncodingInvariantError, IncompatibleWeightsError, OdomError, UsageError
from .eval import format_entries, format_plot_data, format_table, splice_motion, subsequence_error

log = logging.getLogger("lidarodom")

COMMANDS = ("simulate", "encode", "train", "infer", "eval")

# key: (type, default, description)
SETTINGS = {
    "data": (str, "data", "dataset root (KITTI layout); simulate writes here"),
    "out": (str, "run", "output directory"),
    "sequences": (str, "00", "comma separated sequence names"),
    "train_sequences": (str, "", "sequences used by train (default: sequences)"),
    "seed": (int, 0, "seed for simulation, initialisation and sampling"),
    "step": (int, 10, "subsequence start spacing in frames"),
    "threads": (int, 0, "worker threads, 0 = all cores"),
    # simulate
    "world": (str, "", "world file; empty = random boxes world"),
    "frames": (int, 201, "frames per simulated sequence"),
    "speed_max": (float, 1.5, "simulated speed limit, m/frame"),
    "yaw_max": (float, 2.0, "simulated yaw-rate limit, deg/frame"),
    # encoding
    "rows": (int, 64, "encoded rows (laser rings)"),
    "azimuth_step": (float, 1.0, "regression grid column width, degrees"),
    "class_azimuth_step": (float, 0.2, "classification grid column width, degrees"),
    "height_scale": (float, 3.0, "height normalisation H"),
    # model
    "n_prev": (int, 5, "previous frames per regression estimate (N)"),
    "rotation": (str, "classification", "classification | regression | none"),
    "classifier_axes": (str, "x,y,z", "axes with a rotation classifier"),
    "classes_x": (int, 13, "classes for x rotations"),
    "classes_y": (int, 56, "classes for y rotations"),
    "classes_z": (int, 13, "classes for z rotations"),
    "class_step": (float, 0.2, "class spacing, degrees"),
    "window": (str, "3", "decode window width W, or 'all'"),
    "channels": (str, "16,32,64", "CNN part channel counts"),
    "precision": (str, "float32", "float32 | float64"),
    # training
    "epochs": (int, 10, "passes over the training pairs"),
    "iterations": (int, -1, "batches to train; -1 = use epochs, 0 = no updates"),
    "batch": (int, 8, "batch size"),
    "lr": (float, 0.003, "learning rate"),
    "momentum": (float, 0.9, "SGD momentum"),
    "lr_step": (int, 0, "batches between learning-rate decays, 0 = constant"),
    "lr_gamma": (float, 0.1, "learning-rate decay factor"),
    "clip_norm": (float, 10.0, "gradient norm clip, 0 = off"),
    "augment": (int, 0, "regression training: random column rolls and mirroring"),
    "sampled_classes": (int, 12, "classifier training: classes scored per example"),
    "neighbor_classes": (int, 3, "classifier training: neighbours always scored"),
    # infer / eval
    "bundle": (str, "", "model bundle directory (default <out>/model)"),
    "predictions": (str, "", "estimated pose directory (default <out>/poses)"),
    "splice": (str, "none", "eval: take rotation (translation) or translation (rotation) from ground truth"),
}
CHOICES = {
    "rotation": ("classification", "regression", "none"),
    "precision": ("float32", "float64"),
    "splice": ("none", "translation", "rotation"),
}
FLAGS = ("out", "seed", "step", "threads")


# -- configuration ----------------------------------------------------------------


def parse_config(text: str, source="<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise UsageError(f"{source}:{lineno}: expected key = value")
        if key not in SETTINGS:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, value, f"{source}:{lineno}")
    return values


def _convert(key, value, where):
    kind = SETTINGS[key][0]
    try:
        out = kind(value)
    except ValueError:
        raise UsageError(f"{where}: {key} expects {kind.__name__}, got {value!r}") from None
    if key in CHOICES and out not in CHOICES[key]:
        raise UsageError(f"{where}: {key} must be one of {', '.join(CHOICES[key])}, got {value!r}")
    return out


def resolve(file_values: dict, flags: dict) -> dict:
    cfg = {k: v[1] for k, v in SETTINGS.items()}
    cfg.update(file_values)
    cfg.update({k: v for k, v in flags.items() if v is not None})
    _validate(cfg)
    return cfg


def _validate(cfg):
    def need(cond, msg):
        if not cond:
            raise UsageError(msg)

    need(cfg["seed"] >= 0, "seed must be >= 0")
    need(cfg["step"] >= 1, "step must be >= 1")
    need(cfg["threads"] >= 0, "threads must be >= 0")
    need(1 <= cfg["n_prev"] <= 7, "n_prev must be in 1..7")
    need(cfg["frames"] >= 2, "frames must be >= 2")
    need(cfg["batch"] >= 1, "batch must be >= 1")
    need(cfg["iterations"] >= -1, "iterations must be -1, 0 or positive")
    need(cfg["lr"] >= 0, "lr must be >= 0")
    need(cfg["rows"] >= 1 and cfg["azimuth_step"] > 0 and cfg["class_azimuth_step"] > 0, "bad grid")
    need(cfg["height_scale"] > 0, "height_scale must be positive")
    for axis in _axes(cfg):
        need(axis in "xyz" and len(axis) == 1, f"classifier_axes: unknown axis {axis!r}")
        need(cfg[f"classes_{axis}"] >= 2, f"classes_{axis} must be >= 2")
    need(cfg["window"] == "all" or cfg["window"].isdigit(), "window must be a positive integer or 'all'")
    if cfg["window"] != "all":
        w = int(cfg["window"])
        need(w >= 1, "window must be >= 1")
        for axis in _axes(cfg):
            need(w <= cfg[f"classes_{axis}"], f"window {w} exceeds classes_{axis}")
    try:
        chans = _channels(cfg)
    except ValueError:
        raise UsageError(f"channels: expected comma separated integers, got {cfg['channels']!r}") from None
    need(len(chans) == 3 and min(chans) >= 1, "channels needs three positive counts")
    need(_sequences(cfg["sequences"]), "sequences must name at least one sequence")


def _axes(cfg):
    return [a.strip() for a in cfg["classifier_axes"].split(",") if a.strip()]


def _channels(cfg):
    return tuple(int(c) for c in cfg["channels"].split(","))


def _sequences(text):
    return [s.strip() for s in text.split(",") if s.strip()]


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in SETTINGS)


def _dtype(cfg):
    return np.float32 if cfg["precision"] == "float32" else np.float64


# -- dataset access ------------------------------------------------------------------


def load_sequence(root, seq, with_poses=True):
    paths = kitti.sequence_paths(root, seq)
    if not paths["scans"]:
        raise DataError(f"{Path(root) / 'sequences' / seq / 'velodyne'}: no .bin scans")
    clouds = [kitti.load_scan(p) for p in paths["scans"]]
    out = {"name": seq, "clouds": clouds, "calib": kitti.load_calib(paths["calib"])}
    if out["calib"] is None:
        log.info("sequence %s: no calib.txt, camera poses taken as LiDAR poses (identity extrinsic)", seq)
    else:
        log.info("sequence %s: camera-to-velodyne extrinsic from %s", seq, paths["calib"])
    if with_poses:
        if not paths["poses"].exists():
            raise DataError(f"{paths['poses']}: pose file not found")
        poses = kitti.load_poses(paths["poses"])
        if len(poses) != len(clouds):
            raise DataError(f"{paths['poses']}: {len(poses)} poses for {len(clouds)} scans")
        out["poses"] = poses
        out["motions"] = kitti.relative_motions(poses, out["calib"])
    return out


def _camera_poses(motions, calib):
    """Integrate sensor-frame LiDAR motions into KITTI camera poses."""
    mats = [euler_to_matrix(m) for m in motions]
    if calib is not None:
        a = np.eye(4)
        a[:3, :3] = kitti.SENSOR_FROM_KITTI
        # undo the conjugation applied by kitti.relative_motions
        left = calib @ invert_matrix(a)
        right = a @ invert_matrix(calib)
        mats = [left @ m @ right for m in mats]
    poses = np.empty((len(mats) + 1, 4, 4))
    poses[0] = np.eye(4)
    for k, m in enumerate(mats):
        poses[k + 1] = poses[k] @ m
    return poses


# -- commands ------------------------------------------------------------------------


def cmd_simulate(cfg, out: Path):
    root = Path(cfg["data"])
    seqs = _sequences(cfg["sequences"])
    if cfg["world"]:
        path = Path(cfg["world"])
        if not path.exists():
            raise DataError(f"{path}: world file not found")
        world = sim.parse_world(path.read_text(), str(path))
    else:
        world = sim.SyntheticWorld(seed=cfg["seed"])
    world = replace(
        world, rows=cfg["rows"], azimuth_step=cfg["azimuth_step"], speed_max=cfg["speed_max"], yaw_max=cfg["yaw_max"]
    )
    if cfg["world"]:
        runs = []
        for i, _ in enumerate(seqs):
            scans, motions, poses = sim.simulate(world, cfg["frames"], seed=cfg["seed"] * 1000 + i)
            runs.append({"clouds": scans, "motions": motions, "poses": poses})
    else:
        world, runs = sim.street_runs(world, [cfg["frames"]] * len(seqs), seed=cfg["seed"])
    root.mkdir(parents=True, exist_ok=True)
    (root / "world.txt").write_text(sim.format_world(world))
    calib = kitti.nominal_extrinsic()
    tr = " ".join(f"{v:.9g}" for v in calib[:3, :].ravel())
    for seq, run in zip(seqs, runs):
        sdir = root / "sequences" / seq / "velodyne"
        sdir.mkdir(parents=True, exist_ok=True)
        for k, scan in enumerate(run["clouds"]):
            kitti.save_scan(sdir / f"{k:06d}.bin", scan)
        (root / "sequences" / seq / "calib.txt").write_text(f"Tr: {tr}\n")
        (root / "poses").mkdir(parents=True, exist_ok=True)
        kitti.save_poses(root / "poses" / f"{seq}.txt", _camera_poses(run["motions"], calib))
        log.info("sequence %s: %d frames", seq, len(run["clouds"]))


def cmd_encode(cfg, out: Path):
    grid = GridSpec(cfg["rows"], cfg["azimuth_step"])
    for seq in _sequences(cfg["sequences"]):
        data = load_sequence(cfg["data"], seq, with_poses=False)
        d = out / "encoded" / seq
        d.mkdir(parents=True, exist_ok=True)
        for k, cloud in enumerate(data["clouds"]):
            (d / f"{k:06d}.encf").write_bytes(dump_frame(encode(cloud, grid, cfg["height_scale"])))
        log.info("sequence %s: encoded %d frames", seq, len(data["clouds"]))


def build_pipeline(cfg):
    from .odom import OdometryPipeline, RegressionModel, RotationClassifier

    dtype = _dtype(cfg)
    chans = _channels(cfg)
    reg_grid = GridSpec(cfg["rows"], cfg["azimuth_step"])
    cls_grid = GridSpec(cfg["rows"], cfg["class_azimuth_step"])
    seed = cfg["seed"]
    pipe = OdometryPipeline(
        translation=RegressionModel(cfg["n_prev"], "translation", reg_grid, chans, dtype).initialize(seed),
        rotation=cfg["rotation"],
        window="all" if cfg["window"] == "all" else int(cfg["window"]),
        height_scale=cfg["height_scale"],
        workers=cfg["threads"],
    )
    if cfg["rotation"] == "regression":
        pipe.rotation_model = RegressionModel(cfg["n_prev"], "rotation", reg_grid, chans, dtype).initialize(seed + 1)
    elif cfg["rotation"] == "classification":
        for i, axis in enumerate(_axes(cfg)):
            clf = RotationClassifier(axis, cfg["class_step"], cfg[f"classes_{axis}"], cls_grid, chans, dtype)
            pipe.classifiers[axis] = clf.initialize(seed + 2 + i)
    return pipe


def cmd_train(cfg, out: Path):
    from .odom import save_bundle
    from .training import TrainConfig, train_pipeline

    names = _sequences(cfg["train_sequences"] or cfg["sequences"])
    seqs = [load_sequence(cfg["data"], s) for s in names]
    pipe = build_pipeline(cfg)
    tcfg = TrainConfig(
        epochs=cfg["epochs"], iterations=cfg["iterations"], batch=cfg["batch"], lr=cfg["lr"],
        momentum=cfg["momentum"], lr_step=cfg["lr_step"], lr_gamma=cfg["lr_gamma"],
        clip_norm=cfg["clip_norm"], seed=cfg["seed"], augment=bool(cfg["augment"]),
        sampled_classes=cfg["sampled_classes"], neighbor_classes=cfg["neighbor_classes"],
    )
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "loss.txt", "w", newline="\n") as fh:
        fh.write("model step loss\n")

        def on_step(model, step, loss):
            fh.write(f"{model} {step} {loss!r}\n")
            if step % 50 == 0:
                log.info("%s step %d loss %.6g", model, step, loss)

        train_pipeline(pipe, seqs, tcfg, on_step)
    save_bundle(pipe, out / "model")


def cmd_infer(cfg, out: Path):
    from .odom import load_bundle

    bundle = Path(cfg["bundle"]) if cfg["bundle"] else out / "model"
    pipe = load_bundle(bundle, _dtype(cfg))
    pipe.workers = cfg["threads"]
    (out / "poses").mkdir(parents=True, exist_ok=True)
    for seq in _sequences(cfg["sequences"]):
        data = load_sequence(cfg["data"], seq, with_poses=False)
        motions = pipe.run_sequence(data["clouds"])
        kitti.save_poses(out / "poses" / f"{seq}.txt", _camera_poses(motions, data["calib"]))
        log.info("sequence %s: %d poses", seq, len(motions) + 1)


def cmd_eval(cfg, out: Path):
    pred_dir = Path(cfg["predictions"]) if cfg["predictions"] else out / "poses"
    reports = []
    edir = out / "eval"
    edir.mkdir(parents=True, exist_ok=True)
    for seq in _sequences(cfg["sequences"]):
        paths = kitti.sequence_paths(cfg["data"], seq)
        if not paths["poses"].exists():
            raise DataError(f"{paths['poses']}: pose file not found")
        calib = kitti.load_calib(paths["calib"])
        gt_poses = kitti.load_poses(paths["poses"])
        est_path = pred_dir / f"{seq}.txt"
        if not est_path.exists():
            raise DataError(f"{est_path}: estimated pose file not found")
        est_poses = kitti.load_poses(est_path)
        if len(est_poses) != len(gt_poses):
            raise DataError(f"{est_path}: {len(est_poses)} poses, ground truth has {len(gt_poses)}")
        if cfg["splice"] == "none":
            gt, est = Trajectory(gt_poses), Trajectory(est_poses)
        else:
            gm = kitti.relative_motions(gt_poses, calib)
            em = kitti.relative_motions(est_poses, calib)
            gt = integrate(gm)
            est = integrate([splice_motion(e, g, cfg["splice"]) for e, g in zip(em, gm)])
        try:
            rep = subsequence_error(gt, est, step=cfg["step"], sequence=seq)
        except UsageError as exc:
            raise DataError(f"{est_path}: {exc}") from None
        reports.append(rep)
        (edir / f"plot_{seq}.csv").write_text(format_plot_data(gt, est))
    header = f"# step {cfg['step']}, splice {cfg['splice']}"
    if cfg["splice"] != "none":
        header += " (Euler parameters of frame-to-frame LiDAR motions taken from ground truth)"
    (edir / "report.txt").write_text(header + "\n" + format_table(reports))
    (edir / "subsequences.csv").write_text(format_entries(reports))
    for r in reports:
        log.info("sequence %s: error %.6g over %d subsequences", r.sequence, r.error, r.count)


HANDLERS = {"simulate": cmd_simulate, "encode": cmd_encode, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


# -- entry point ------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="odom", description="LiDAR odometry with convolutional networks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="key = value configuration file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--step", type=int, help="subsequence start spacing (eval)")
    p.add_argument("--threads", type=int, help="worker threads, 0 = all cores")
    return p


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cpath = Path(args.config)
        if not cpath.exists():
            raise UsageError(f"{cpath}: config file not found")
        cfg = resolve(parse_config(cpath.read_text(), str(cpath)), {k: getattr(args, k) for k in FLAGS})
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.command}.cfg").write_text(format_config(cfg))
        threads = cfg["threads"] or os.cpu_count() or 1
        cfg["threads"] = threads
        with set_threads(threads):
            HANDLERS[args.command](cfg, out)
        return 0
    except UsageError as exc:
        log.error("usage error: %s", exc)
        return 1
    except (DataError, IncompatibleWeightsError, EmptyFrameError, EncodingInvariantError, OSError) as exc:
        log.error("data error: %s", exc)
        return 2
    except OdomError as exc:
        log.error("error: %s", exc)
        return 2


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
