#!/usr/bin/env python3
"""
Synthetic Dental-Arch Dataset

Generates parametric dental arches and turns them into completion pairs:
- ArchSceneSpec / ArchScene: a segmented synthetic scan (labeled teeth + gingiva)
- CompletionPair: (partial, gt) resampled to a fixed budget in a shared frame
- build_split: scene-level train/val/test split
- save_pair / load_pair: the on-disk pair layout

Pair construction: the target tooth is removed and becomes the ground truth;
the partial is its local context (position-adjacent teeth plus the n gingiva
points nearest the removed tooth). Both are normalized with one shared
transform and resampled to num_points.

Tooth morphology depends on distance from the arch midline: incisor-like
crowns (1-2 cusps, narrow, tall) in the middle, molar-like crowns (4-5
cusps, wide, low) at the ends. Labels run 1..tooth_count along the arch.
"""

import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent))

from errors import ConfigError, PairFormatError
from geometry import (NormalizationStats, PointCloud, normalize, read_xyz,
                      resample_to, write_xyz)

DEFAULT_NUM_POINTS = 2048
DEFAULT_N_GINGIVA = 512

# Largest radial cusp bump, as a fraction of the crown radius
MAX_CUSP_HEIGHT = 0.12


@dataclass
class ArchSceneSpec:
    """Parameters of one synthetic arch (all lengths in scan units, ~mm)"""

    tooth_count: int = 10
    points_per_tooth: int = 1200
    gingiva_points: int = 4000
    arch_width: float = 50.0
    arch_depth: float = 40.0
    cusp_count_range: Tuple[int, int] = (1, 5)
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.cusp_count_range = tuple(int(c) for c in self.cusp_count_range)
        self.validate()

    def validate(self) -> None:
        if not 6 <= self.tooth_count <= 14:
            raise ConfigError("tooth_count", f"must be in [6, 14], got {self.tooth_count}")
        for name in ("points_per_tooth", "gingiva_points"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be positive")
        for name in ("arch_width", "arch_depth"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be positive")
        lo, hi = self.cusp_count_range
        if lo < 1 or hi < lo:
            raise ConfigError("cusp_count_range", f"need 1 <= min <= max, got {self.cusp_count_range}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma", "must be >= 0")

    def with_seed(self, seed: int) -> 'ArchSceneSpec':
        return replace(self, seed=int(seed))


@dataclass
class ArchScene:
    """A segmented synthetic scan"""

    teeth: Dict[int, PointCloud]   # position label -> crown points
    gingiva: PointCloud
    spec: ArchSceneSpec
    scene_id: str = ""

    @property
    def labels(self) -> List[int]:
        return sorted(self.teeth)

    def min_tooth_gap(self) -> float:
        """Smallest point distance between any two different teeth"""
        labels = self.labels
        trees = {label: cKDTree(self.teeth[label].points) for label in labels}
        gap = np.inf
        for i, a in enumerate(labels):
            for b in labels[i + 1:]:
                dist, _ = trees[b].query(self.teeth[a].points, k=1)
                gap = min(gap, float(dist.min()))
        return gap


@dataclass
class CompletionPair:
    """One training/eval sample"""

    partial: PointCloud
    gt: PointCloud
    context: PointCloud          # retained neighborhood, original frame, before resampling
    target_position: int
    stats: NormalizationStats    # shared by partial and gt
    seed: int = 0
    scene_id: str = ""

    def __post_init__(self):
        if self.partial.count != self.gt.count:
            raise ValueError(
                f"partial and gt must have equal counts ({self.partial.count} != {self.gt.count})"
            )

    @property
    def pair_id(self) -> str:
        return f"{self.scene_id}_{self.target_position}"

    def meta(self) -> Dict:
        return {
            'target_position': self.target_position,
            **self.stats.to_dict(),
            'seed': self.seed,
            'scene_id': self.scene_id,
        }


def morphology_rank(label: int, tooth_count: int) -> float:
    """0 at the arch midline (incisor-like) .. 1 at the arch ends (molar-like)"""
    half = (tooth_count - 1) / 2
    return abs((label - 1) - half) / half


def morphology_class(label: int, tooth_count: int) -> str:
    """Coarse crown class used by per-position reporting"""
    r = morphology_rank(label, tooth_count)
    if r < 0.34:
        return "incisor"
    if r < 0.67:
        return "premolar"
    return "molar"


def _arch_frame(spec: ArchSceneSpec, arc_positions: np.ndarray, x_limit: float):
    """Points and unit tangents on the parabola y = depth * (1 - (2x/width)^2) at given arc lengths"""
    xs = np.linspace(-x_limit, x_limit, 4001)
    ys = spec.arch_depth * (1 - (2 * xs / spec.arch_width) ** 2)
    seg = np.hypot(np.diff(xs), np.diff(ys))
    arc = np.concatenate([[0.0], np.cumsum(seg)])

    x = np.interp(arc_positions, arc, xs)
    y = spec.arch_depth * (1 - (2 * x / spec.arch_width) ** 2)
    slope = -8 * spec.arch_depth * x / spec.arch_width ** 2
    tangent = np.stack([np.ones_like(x), slope], axis=1)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    return np.stack([x, y], axis=1), tangent, arc[-1]


def _sample_crown(rng: np.random.Generator, n: int, half_md: float, half_bl: float,
                  height: float, exponent: float, cusp_count: int, cusp_height: float) -> np.ndarray:
    """
    Points on a superellipsoid crown with radial cusp bumps (local frame)

    Local axes: u mesiodistal, v buccolingual, z occlusal. Only directions with
    z >= -0.25 are kept, so the crown is open at the cervical end.
    """
    azimuth0 = np.pi / max(cusp_count, 1) + rng.uniform(-0.15, 0.15)
    if cusp_count == 1:
        cusps = np.array([[0.0, 0.15, 0.99]])
    else:
        angles = azimuth0 + 2 * np.pi * np.arange(cusp_count) / cusp_count
        ring = np.sin(np.radians(40))
        cusps = np.stack([ring * np.cos(angles), ring * np.sin(angles),
                          np.full(cusp_count, np.cos(np.radians(40)))], axis=1)
    cusps /= np.linalg.norm(cusps, axis=1, keepdims=True)

    out = np.empty((0, 3))
    while out.shape[0] < n:
        d = rng.normal(size=(2 * n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        d = d[d[:, 2] >= -0.25]

        # Ray/superellipsoid intersection: F(t d) = 1 with F homogeneous of degree 2
        horizontal = (np.abs(d[:, 0] / half_md) ** (2 / exponent)
                      + np.abs(d[:, 1] / half_bl) ** (2 / exponent))
        f = horizontal ** exponent + (d[:, 2] / height) ** 2
        t = f ** -0.5

        bump = np.exp(-np.sum((d[:, None, :] - cusps[None, :, :]) ** 2, axis=2) / (2 * 0.3 ** 2))
        t *= 1 + cusp_height * bump.max(axis=1)
        out = np.concatenate([out, d * t[:, None]], axis=0)

    return out[:n]


def generate_scene(spec: ArchSceneSpec) -> ArchScene:
    """
    Build one synthetic arch; a pure function of spec (seed included)

    Teeth sit at equal arc-length steps along the parabolic arch and each
    crown's horizontal footprint stays inside half the distance to its
    neighbours, so crowns never intersect. Gingiva is a band surface
    below the crowns.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    count = spec.tooth_count

    x_limit = 0.85 * spec.arch_width / 2
    _, _, total_arc = _arch_frame(spec, np.array([0.0]), x_limit)
    arc_positions = total_arc * (np.arange(count) + 0.5) / count
    centers, tangents, _ = _arch_frame(spec, arc_positions, x_limit)

    min_chord = float(np.min(np.linalg.norm(np.diff(centers, axis=0), axis=1)))
    footprint = 0.40 * min_chord / (1 + MAX_CUSP_HEIGHT)

    lo, hi = spec.cusp_count_range
    teeth: Dict[int, np.ndarray] = {}
    for i in range(count):
        label = i + 1
        r = morphology_rank(label, count)
        jitter = rng.uniform(0.95, 1.0, size=3)

        half_md = footprint * (0.72 + 0.28 * r) * jitter[0]
        half_bl = footprint * (0.55 + 0.45 * r) * jitter[1]
        height = min_chord * (0.55 - 0.15 * r) * jitter[2]
        exponent = 0.55 + 0.35 * r
        cusp_count = int(round(lo + r * (hi - lo)))
        cusp_height = MAX_CUSP_HEIGHT * rng.uniform(0.8, 1.0)

        local = _sample_crown(rng, spec.points_per_tooth, half_md, half_bl, height,
                              exponent, cusp_count, cusp_height)

        t = tangents[i]
        normal = np.array([-t[1], t[0]])
        xy = centers[i] + local[:, :1] * t + local[:, 1:2] * normal
        z = local[:, 2] + 0.3 * height * (1 + MAX_CUSP_HEIGHT)
        teeth[label] = np.concatenate([xy, z[:, None]], axis=1)

    # Gingiva band: arch-following strip, curving downward away from the crown line
    band = 0.9 * min_chord
    s = rng.uniform(-0.3 * min_chord, total_arc + 0.3 * min_chord, size=spec.gingiva_points)
    offset = rng.uniform(-band, band, size=spec.gingiva_points)
    g_centers, g_tangents, _ = _arch_frame(spec, np.clip(s, 0, total_arc), x_limit)
    g_normals = np.stack([-g_tangents[:, 1], g_tangents[:, 0]], axis=1)
    g_xy = g_centers + offset[:, None] * g_normals
    g_z = -0.05 * min_chord - 0.25 * min_chord * (offset / band) ** 2
    gingiva = np.concatenate([g_xy, g_z[:, None]], axis=1)

    if spec.noise_sigma > 0:
        for label in teeth:
            teeth[label] = teeth[label] + rng.normal(0, spec.noise_sigma, size=teeth[label].shape)
        gingiva = gingiva + rng.normal(0, spec.noise_sigma, size=gingiva.shape)

    return ArchScene(
        teeth={label: PointCloud(points) for label, points in teeth.items()},
        gingiva=PointCloud(gingiva),
        spec=spec,
    )


def make_pair(scene: ArchScene, target: int, n_gingiva: int = DEFAULT_N_GINGIVA,
              seed: int = 0, num_points: int = DEFAULT_NUM_POINTS) -> CompletionPair:
    """
    Remove the target tooth and keep its local context

    Args:
        scene: Segmented arch
        target: Position label of the tooth to remove
        n_gingiva: Gingiva points kept, nearest to the removed tooth's centroid
        seed: Resampling seed
        num_points: Point budget for partial and gt

    Returns:
        CompletionPair with partial/gt in one shared normalized frame
    """
    if target not in scene.teeth:
        raise ValueError(f"unknown target label {target} (scene has {scene.labels})")
    if not 1 <= n_gingiva <= scene.gingiva.count:
        raise ValueError(f"n_gingiva={n_gingiva} out of range [1, {scene.gingiva.count}]")

    gt_raw = scene.teeth[target]
    neighbours = [scene.teeth[label] for label in (target - 1, target + 1) if label in scene.teeth]

    dist = np.linalg.norm(scene.gingiva.points - gt_raw.centroid(), axis=1)
    nearest = np.argsort(dist, kind='stable')[:n_gingiva]
    context = PointCloud(np.concatenate([n.points for n in neighbours]
                                        + [scene.gingiva.points[nearest]], axis=0))

    _, stats = normalize(context.concat(gt_raw))

    partial_seed, gt_seed = np.random.default_rng(seed).integers(0, 2 ** 31 - 1, size=2)
    partial = resample_to(stats.apply(context), num_points, int(partial_seed))
    gt = resample_to(stats.apply(gt_raw), num_points, int(gt_seed))

    return CompletionPair(
        partial=partial,
        gt=gt,
        context=context,
        target_position=target,
        stats=stats,
        seed=seed,
        scene_id=scene.scene_id,
    )


def split_counts(n_scenes: int, ratios: Sequence[float]) -> Tuple[int, int, int]:
    """Scene counts per split; raises ConfigError when a split would be empty"""
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError("ratios", f"need three positive ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("ratios", f"must sum to 1, got {sum(ratios)}")

    n_train = int(round(ratios[0] * n_scenes))
    n_val = int(round(ratios[1] * n_scenes))
    n_test = n_scenes - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError("n_scenes", f"{n_scenes} scenes cannot populate splits {ratios}")
    return n_train, n_val, n_test


def build_split(spec: ArchSceneSpec, n_scenes: int, ratios: Sequence[float], seed: int,
                n_gingiva: int = DEFAULT_N_GINGIVA, num_points: int = DEFAULT_NUM_POINTS,
                workers: int = 1) -> Tuple[List[CompletionPair], List[CompletionPair], List[CompletionPair]]:
    """
    Generate n_scenes arches and split them at scene level

    Every tooth of a scene becomes one pair; all pairs of a scene land in
    the same split. Scene seeds come from independent SeedSequence children
    of seed, so the result does not depend on workers.

    Returns:
        (train, val, test) pair lists
    """
    n_train, n_val, _ = split_counts(n_scenes, ratios)

    children = np.random.SeedSequence(seed).spawn(n_scenes)
    scene_seeds = [int(c.generate_state(1)[0]) for c in children]

    def build_scene_pairs(index: int) -> List[CompletionPair]:
        scene = generate_scene(spec.with_seed(scene_seeds[index]))
        scene.scene_id = f"scene_{index:04d}"
        return [make_pair(scene, label, n_gingiva=n_gingiva,
                          seed=scene_seeds[index] + label, num_points=num_points)
                for label in scene.labels]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_scene = list(pool.map(build_scene_pairs, range(n_scenes)))
    else:
        per_scene = [build_scene_pairs(i) for i in range(n_scenes)]

    order = np.random.default_rng(seed).permutation(n_scenes)
    groups = (sorted(order[:n_train]), sorted(order[n_train:n_train + n_val]),
              sorted(order[n_train + n_val:]))
    return tuple([pair for i in group for pair in per_scene[i]] for group in groups)


def save_pair(pair: CompletionPair, directory: Path) -> None:
    """Write partial.xyz, gt.xyz, context.xyz and meta.json into directory"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_xyz(directory / "partial.xyz", pair.partial)
    write_xyz(directory / "gt.xyz", pair.gt)
    write_xyz(directory / "context.xyz", pair.context)
    with open(directory / "meta.json", 'w') as f:
        json.dump(pair.meta(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_pair(directory: Path) -> CompletionPair:
    """
    Read a pair directory

    Raises:
        PairFormatError: Missing file or bad meta.json
        XYZFormatError: Malformed point file (names the line)
    """
    directory = Path(directory)
    for name in ("partial.xyz", "gt.xyz", "context.xyz", "meta.json"):
        if not (directory / name).exists():
            raise PairFormatError(f"{directory}: missing {name}")

    try:
        with open(directory / "meta.json", 'r') as f:
            meta = json.load(f)
        stats = NormalizationStats.from_dict(meta)
        target = int(meta['target_position'])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise PairFormatError(f"{directory / 'meta.json'}: {e}")

    return CompletionPair(
        partial=read_xyz(directory / "partial.xyz"),
        gt=read_xyz(directory / "gt.xyz"),
        context=read_xyz(directory / "context.xyz"),
        target_position=target,
        stats=stats,
        seed=int(meta.get('seed', 0)),
        scene_id=str(meta.get('scene_id', '')),
    )


def save_split(pairs: List[CompletionPair], root: Path, split: str) -> List[Path]:
    """Write every pair under root/split/<scene_id>_<position>/"""
    paths = []
    for pair in pairs:
        path = Path(root) / split / pair.pair_id
        save_pair(pair, path)
        paths.append(path)
    return paths


def load_split(root: Path, split: str) -> List[CompletionPair]:
    """Load every pair directory of a split, in sorted directory order"""
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise PairFormatError(f"missing split directory {split_dir}")
    return [load_pair(d) for d in sorted(split_dir.iterdir()) if d.is_dir()]


if __name__ == "__main__":
    # Quick test
    print("Generating a synthetic arch...")
    scene = generate_scene(ArchSceneSpec(seed=7))
    print(f"Teeth: {scene.labels}, gingiva: {scene.gingiva.count} points")
    print(f"Min inter-tooth gap: {scene.min_tooth_gap():.3f}")
    pair = make_pair(scene, target=1)
    print(f"Terminal pair: partial={pair.partial.count}, gt={pair.gt.count}, context={pair.context.count}")
    print("\n✅ Done")
