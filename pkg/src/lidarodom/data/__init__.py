"""Dataset ingestion (KITTI formats) and the synthetic scan simulator."""
from .kitti import (
    infer_rings, load_calib, load_poses, load_scan, relative_motions, save_poses, save_scan,
)
from .sim import SyntheticWorld, parse_world, random_world, simulate

__all__ = [
    "infer_rings", "load_calib", "load_poses", "load_scan", "relative_motions", "save_poses",
    "save_scan", "SyntheticWorld", "parse_world", "random_world", "simulate",
]
