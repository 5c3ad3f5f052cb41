#!/usr/bin/env python3
"""
Result Analysis

Post-training views of a model:
- the three-row prototype-memory / dual-encoder ablation table
- PCA embedding of partial features and prototypes, with the
  compactness ratio rho measured in the full feature space
- how test queries spread over the prototype rows (usage, label purity)
"""

import csv
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.spatial.distance import pdist
from sklearn.decomposition import PCA

sys.path.insert(0, str(Path(__file__).parent))

from dataset import CompletionPair
from errors import DataError
from memory import retrieve_batch
from model import CompletionNetwork
from training import stack_clouds

# (use_pm, use_de) in table order: baseline, memory only, full
ABLATION_GRID: List[Tuple[bool, bool]] = [(False, False), (True, False), (True, True)]

EMBEDDING_COLUMNS = ["kind", "position_label", "pc1", "pc2"]


@dataclass
class AblationRow:
    """Test CD of one ablation configuration over several seeds"""

    use_pm: bool
    use_de: bool
    seeds: List[int] = field(default_factory=list)
    cd_e4: List[float] = field(default_factory=list)

    @property
    def median_cd_e4(self) -> float:
        return float(np.median(self.cd_e4)) if self.cd_e4 else float('nan')

    @property
    def name(self) -> str:
        return f"pm={'on' if self.use_pm else 'off'}_de={'on' if self.use_de else 'off'}"

    def to_dict(self) -> Dict:
        return {
            'name': self.name,
            'use_pm': self.use_pm,
            'use_de': self.use_de,
            'seeds': list(self.seeds),
            'cd_e4': list(self.cd_e4),
            'median_cd_e4': self.median_cd_e4,
        }


def ablation_table(rows: List[AblationRow]) -> List[str]:
    """Human-readable table, one line per configuration"""
    mark = lambda flag: "✓" if flag else "-"
    lines = [f"{'PM':^4}{'DE':^4}{'median CD x1e-4':>18}{'seeds':>8}", "-" * 34]
    for row in rows:
        lines.append(f"{mark(row.use_pm):^4}{mark(row.use_de):^4}{row.median_cd_e4:>18.4f}{len(row.seeds):>8}")
    return lines


def ablation_ordering(rows: List[AblationRow]) -> Dict[str, bool]:
    """Check full <= memory-only <= baseline on median CD"""
    by_flags = {(r.use_pm, r.use_de): r.median_cd_e4 for r in rows}
    baseline, memory_only, full = (by_flags[k] for k in ABLATION_GRID)
    return {
        'memory_helps': memory_only <= baseline,
        'dual_encoders_help': full <= memory_only,
    }


def partial_features(model: CompletionNetwork, pairs: List[CompletionPair],
                     batch_size: int = 16) -> np.ndarray:
    """(n, d) partial-encoder descriptors of every pair"""
    feats = []
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            batch = stack_clouds(pairs[start:start + batch_size], "partial", model.dtype)
            feats.append(model.encoder_partial(batch).double().numpy())
    return np.concatenate(feats, axis=0)


def compactness_ratio(prototypes: np.ndarray, partials: np.ndarray) -> float:
    """
    Mean pairwise distance of prototypes over that of partial features

    rho < 1 means the bank is more tightly clustered than the inputs.
    Identical prototypes, or a single one, give 0.
    """
    if len(partials) < 2:
        raise DataError("compactness needs at least two partial features")
    if len(prototypes) < 2:
        return 0.0
    spread = float(np.mean(pdist(partials)))
    if spread == 0:
        raise DataError("partial features are all identical; compactness is undefined")
    return float(np.mean(pdist(prototypes))) / spread


def project_pca(partials: np.ndarray, prototypes: np.ndarray) -> Tuple[np.ndarray, PCA]:
    """
    Two-component PCA fitted on the union of both sets

    Returns:
        ((n + K, 2) coordinates, partials first), fitted PCA
    """
    union = np.concatenate([partials, prototypes], axis=0)
    if union.shape[0] < 3:
        raise DataError(f"need at least 3 features to embed, got {union.shape[0]}")

    pca = PCA(n_components=2, svd_solver="full")
    coords = pca.fit_transform(union)

    # Fix the sign of each axis so reruns agree
    for axis in range(2):
        pivot = int(np.argmax(np.abs(pca.components_[axis])))
        if pca.components_[axis, pivot] < 0:
            coords[:, axis] *= -1
    return coords, pca


def embedding_rows(coords: np.ndarray, labels: Sequence[int], K: int) -> List[Dict]:
    """CSV rows: partials carry their position label, prototypes carry -1"""
    n = len(labels)
    rows = [{'kind': 'partial', 'position_label': int(labels[i]),
             'pc1': float(coords[i, 0]), 'pc2': float(coords[i, 1])} for i in range(n)]
    rows += [{'kind': 'prototype', 'position_label': -1,
              'pc1': float(coords[n + k, 0]), 'pc2': float(coords[n + k, 1])} for k in range(K)]
    return rows


def write_embedding_csv(path: Path, rows: List[Dict]) -> None:
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=EMBEDDING_COLUMNS, lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{row[k]:.9f}" if isinstance(row[k], float) else row[k])
                             for k in EMBEDDING_COLUMNS})


def prototype_usage_report(model: CompletionNetwork, partials: np.ndarray,
                           labels: Sequence[int], tau: float,
                           confidence: str = "similarity") -> Dict:
    """
    Which prototype each partial query retrieves, grouped per row

    Rows record hits, the majority position label among their queries and
    that label's share (purity). usage_entropy is normalized to [0, 1].
    """
    bank = model.memory
    queries = torch.as_tensor(partials, dtype=model.dtype)
    indices, _, alpha = retrieve_batch(bank, queries, tau, branch="partial",
                                       confidence=confidence, record=False)
    indices = indices.numpy()

    rows = []
    for k in range(bank.K):
        hit_labels = [int(labels[i]) for i in np.flatnonzero(indices == k)]
        row = {'row': k, 'hits': len(hit_labels), 'majority_label': None, 'purity': None}
        if hit_labels:
            values, counts = np.unique(hit_labels, return_counts=True)
            best = int(np.argmax(counts))
            row['majority_label'] = int(values[best])
            row['purity'] = float(counts[best] / len(hit_labels))
        rows.append(row)

    hits = np.array([r['hits'] for r in rows], dtype=np.float64)
    p = hits[hits > 0] / hits.sum()
    entropy = float(-(p * np.log(p)).sum())
    used = [r for r in rows if r['hits'] > 0]

    return {
        'rows': rows,
        'used_rows': len(used),
        'usage_entropy': entropy / np.log(bank.K) if bank.K > 1 else 0.0,
        'weighted_purity': float(sum(r['purity'] * r['hits'] for r in used) / hits.sum()),
        'alpha_mean': float(alpha.double().mean()),
    }


def plot_embedding(path: Path, coords: np.ndarray, labels: Sequence[int], K: int) -> Optional[Path]:
    """PNG scatter of partials (coloured by position) and prototypes; None without matplotlib"""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return None

    n = len(labels)
    fig, ax = plt.subplots(figsize=(8, 6))
    scatter = ax.scatter(coords[:n, 0], coords[:n, 1], c=list(labels), cmap='viridis',
                         s=12, alpha=0.6, label='partial')
    ax.scatter(coords[n:n + K, 0], coords[n:n + K, 1], c='red', marker='x', s=40, label='prototype')
    fig.colorbar(scatter, ax=ax, label='position label')
    ax.set_xlabel('pc1')
    ax.set_ylabel('pc2')
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


if __name__ == "__main__":
    # Quick test
    rng = np.random.default_rng(0)
    partials = rng.normal(size=(20, 8))
    prototypes = 0.1 * rng.normal(size=(4, 8))
    coords, pca = project_pca(partials, prototypes)
    print(f"Explained variance: {pca.explained_variance_ratio_}")
    print(f"rho = {compactness_ratio(prototypes, partials):.4f}")
    rows = [AblationRow(pm, de, [0], [3.0 - i]) for i, (pm, de) in enumerate(ABLATION_GRID)]
    print("\n".join(ablation_table(rows)))
    print(f"Ordering: {ablation_ordering(rows)}")
    print("\n✅ Done")
