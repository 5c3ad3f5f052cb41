#!/usr/bin/env python3
"""
Point-Set Geometry

Deterministic kernels shared by the dataset, the losses, and the metrics:
- PointCloud / NormalizationStats: the geometry carriers
- normalize, farthest_point_sample, resample_to
- chamfer_l2, fscore (numpy + cKDTree), chamfer_l2_torch (differentiable loss)
- read_xyz / write_xyz: the XYZ-text point format

Chamfer convention (CD-L2): squared L2, mean over each direction, directions
summed. The loss and the metric both use it.

All functions are pure; nothing here holds mutable state.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from scipy.spatial import cKDTree

import sys
sys.path.insert(0, str(Path(__file__).parent))

from errors import DegenerateCloudError, XYZFormatError

XYZ_DECIMALS = 9


@dataclass
class PointCloud:
    """Ordered (N, 3) array of finite points in model units"""

    points: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {points.shape}")
        if points.shape[0] == 0:
            raise ValueError("empty cloud")
        if not np.all(np.isfinite(points)):
            raise ValueError("cloud contains non-finite coordinates")
        self.points = points

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    def __len__(self) -> int:
        return self.count

    def take(self, indices) -> 'PointCloud':
        """Subset (or reorder) by index list"""
        return PointCloud(self.points[np.asarray(indices, dtype=np.int64)])

    def concat(self, *others: 'PointCloud') -> 'PointCloud':
        return PointCloud(np.concatenate([self.points] + [o.points for o in others], axis=0))

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def __repr__(self) -> str:
        return f"PointCloud(N={self.count})"


@dataclass
class NormalizationStats:
    """The (p - centroid) / scale transform applied by normalize()"""

    centroid: Tuple[float, float, float]
    scale: float

    def __post_init__(self):
        self.centroid = tuple(float(c) for c in self.centroid)
        self.scale = float(self.scale)
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def apply(self, pc: PointCloud) -> PointCloud:
        """Map a cloud into the normalized frame"""
        return PointCloud((pc.points - np.asarray(self.centroid)) / self.scale)

    def invert(self, pc: PointCloud) -> PointCloud:
        """Map a normalized cloud back into the original frame"""
        return PointCloud(pc.points * self.scale + np.asarray(self.centroid))

    def to_dict(self) -> Dict:
        return {'centroid': list(self.centroid), 'scale': self.scale}

    @classmethod
    def from_dict(cls, data: Dict) -> 'NormalizationStats':
        return cls(centroid=tuple(data['centroid']), scale=data['scale'])


def normalize(pc: PointCloud) -> Tuple[PointCloud, NormalizationStats]:
    """
    Zero-mean / unit-sphere normalization

    Scale is the max centroid-to-point distance, so the normalized cloud
    lies inside the unit ball and touches its boundary.

    Raises:
        DegenerateCloudError: If every point is identical
    """
    points = pc.points
    if np.all(points == points[0]):
        raise DegenerateCloudError()

    centroid = points.mean(axis=0)
    scale = float(np.max(np.linalg.norm(points - centroid, axis=1)))
    stats = NormalizationStats(centroid=tuple(centroid), scale=scale)
    return stats.apply(pc), stats


def farthest_point_sample(pc: PointCloud, m: int, seed: int,
                          first_index: Optional[int] = None) -> np.ndarray:
    """
    Greedy farthest-point sampling

    Args:
        pc: Cloud to sample from
        m: Number of indices to return (1 <= m <= N)
        seed: Chooses the first index when first_index is None
        first_index: Explicit starting index

    Returns:
        (m,) int64 array of distinct indices. Ties go to the lowest index.
    """
    n = pc.count
    if m < 1:
        raise ValueError(f"sample size must be >= 1, got {m}")
    if m > n:
        raise ValueError(f"sample larger than cloud ({m} > {n})")

    if first_index is None:
        first_index = int(np.random.default_rng(seed).integers(n))
    elif not 0 <= first_index < n:
        raise ValueError(f"first_index {first_index} out of range for N={n}")

    points = pc.points
    selected = np.empty(m, dtype=np.int64)
    selected[0] = first_index

    min_sq = np.sum((points - points[first_index]) ** 2, axis=1)
    min_sq[first_index] = -1.0  # already taken

    for i in range(1, m):
        # np.argmax returns the first maximum -> lowest index on ties
        nxt = int(np.argmax(min_sq))
        selected[i] = nxt
        min_sq = np.minimum(min_sq, np.sum((points - points[nxt]) ** 2, axis=1))
        min_sq[nxt] = -1.0

    return selected


def resample_to(pc: PointCloud, m: int, seed: int) -> PointCloud:
    """
    Resample a cloud to exactly m points

    N >= m: farthest-point subset. N < m: the cloud followed by duplicates
    of indices 0, 1, 2, ... (cycling) until m points exist.
    """
    n = pc.count
    if n >= m:
        return pc.take(farthest_point_sample(pc, m, seed))
    extra = np.arange(m - n) % n
    return PointCloud(np.concatenate([pc.points, pc.points[extra]], axis=0))


def _nearest_sq(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Squared distance from every query point to its nearest reference point"""
    dist, _ = cKDTree(reference).query(query, k=1)
    return dist ** 2


def _nearest_sq_brute(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    diff = query[:, None, :] - reference[None, :, :]
    return np.min(np.sum(diff * diff, axis=2), axis=1)


def chamfer_l2(a: PointCloud, b: PointCloud, method: str = "kdtree") -> float:
    """
    Symmetric squared-L2 Chamfer distance (CD-L2)

    CD(A, B) = mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2

    Args:
        method: "kdtree" (cKDTree nearest neighbours) or "brute" (O(NM) matrix)
    """
    if method == "kdtree":
        nearest = _nearest_sq
    elif method == "brute":
        nearest = _nearest_sq_brute
    else:
        raise ValueError(f"Unknown chamfer method '{method}'")

    # The two terms are computed the same way for (a, b) and (b, a), so the sum is symmetric bit-for-bit
    return float(np.mean(nearest(a.points, b.points))) + float(np.mean(nearest(b.points, a.points)))


def fscore(a: PointCloud, b: PointCloud, tau: float = 0.01) -> float:
    """
    F-score at distance threshold tau (unsquared L2)

    precision: fraction of a-points within tau of b; recall: the reverse.
    Returns 0 when precision + recall is 0.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")

    dist_ab, _ = cKDTree(b.points).query(a.points, k=1)
    dist_ba, _ = cKDTree(a.points).query(b.points, k=1)
    precision = float(np.mean(dist_ab < tau))
    recall = float(np.mean(dist_ba < tau))

    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def chamfer_matches(pred: torch.Tensor, gt: torch.Tensor,
                    chunk: int = 128) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Nearest gt index per pred point (B, N) and nearest pred index per gt point (B, M)

    Pred points are scanned in blocks of `chunk`, so peak memory is
    B * chunk * M * 3 instead of B * N * M * 3. Ties go to the lowest index.
    """
    B, N, _ = pred.shape
    M = gt.shape[1]
    with torch.no_grad():
        idx_pred = torch.empty((B, N), dtype=torch.long)
        best_sq = torch.full((B, M), float('inf'), dtype=pred.dtype)
        idx_gt = torch.zeros((B, M), dtype=torch.long)
        for start in range(0, N, chunk):
            block = pred[:, start:start + chunk]
            diff = block.unsqueeze(2) - gt.unsqueeze(1)
            sq = (diff * diff).sum(dim=-1)  # (B, chunk, M)
            idx_pred[:, start:start + block.shape[1]] = sq.argmin(dim=2)

            block_sq, block_idx = sq.min(dim=1)
            better = block_sq < best_sq
            best_sq = torch.where(better, block_sq, best_sq)
            idx_gt = torch.where(better, block_idx + start, idx_gt)
        return idx_pred, idx_gt


def chamfer_l2_torch(pred: torch.Tensor, gt: torch.Tensor,
                     matches: Optional[Tuple[torch.Tensor, torch.Tensor]] = None) -> torch.Tensor:
    """
    Differentiable CD-L2 for batched clouds

    Args:
        pred: (B, N, 3)
        gt: (B, M, 3)
        matches: Precomputed chamfer_matches(pred, gt); recomputed when None

    Returns:
        (B,) per-sample Chamfer distance

    Nearest neighbours are found without gradient; the loss is then the exact
    squared difference of the matched pairs, so the gradient reaches each
    point's current nearest neighbour (the subgradient of the min).
    """
    if pred.dim() != 3 or gt.dim() != 3:
        raise ValueError("chamfer_l2_torch expects (B, N, 3) tensors")

    idx_pred, idx_gt = matches if matches is not None else chamfer_matches(pred, gt)

    matched_gt = torch.gather(gt, 1, idx_pred.unsqueeze(-1).expand(-1, -1, 3))
    matched_pred = torch.gather(pred, 1, idx_gt.unsqueeze(-1).expand(-1, -1, 3))

    forward = ((pred - matched_gt) ** 2).sum(dim=-1).mean(dim=1)
    backward = ((gt - matched_pred) ** 2).sum(dim=-1).mean(dim=1)
    return forward + backward


def write_xyz(path: Union[str, Path], pc: PointCloud, comments: Optional[List[str]] = None) -> None:
    """Write XYZ-text: optional '#' comment lines, then 'x y z' per line (LF)"""
    lines = [f"# {c}" for c in (comments or [])]
    fmt = f"{{:.{XYZ_DECIMALS}f}}"
    for x, y, z in pc.points:
        lines.append(f"{fmt.format(x)} {fmt.format(y)} {fmt.format(z)}")
    with open(path, 'w', newline='\n') as f:
        f.write("\n".join(lines) + "\n")


def read_xyz(path: Union[str, Path]) -> PointCloud:
    """
    Parse XYZ-text

    Raises:
        XYZFormatError: naming the first malformed line
    """
    rows = []
    with open(path, 'r') as f:
        for line_num, raw in enumerate(f, 1):
            line = raw.rstrip('\n')
            if line.startswith('#'):
                continue
            fields = line.split(' ')
            if len(fields) != 3:
                raise XYZFormatError(str(path), line_num, f"expected 3 values, got {len(fields)}")
            try:
                row = [float(v) for v in fields]
            except ValueError:
                raise XYZFormatError(str(path), line_num, f"not a number: '{line}'")
            if not all(np.isfinite(row)):
                raise XYZFormatError(str(path), line_num, "non-finite coordinate")
            rows.append(row)

    if not rows:
        raise XYZFormatError(str(path), 0, "no points")
    return PointCloud(np.array(rows, dtype=np.float64))


if __name__ == "__main__":
    # Quick check
    print("Testing geometry kernels...")
    line = PointCloud(np.array([[float(i), 0.0, 0.0] for i in range(11)]))
    print(f"FPS on collinear points from index 0: {farthest_point_sample(line, 3, seed=0, first_index=0)}")
    a = PointCloud(np.array([[0.0, 0.0, 0.0]]))
    b = PointCloud(np.array([[1.0, 0.0, 0.0]]))
    print(f"chamfer_l2(single pair) = {chamfer_l2(a, b)}")
    print("\n✅ Done")
