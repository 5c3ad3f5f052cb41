#!/usr/bin/env python3
"""
Analysis Tests

Ablation table and ordering, compactness ratio, PCA projection, the
embedding CSV and the prototype usage report.
"""

import csv
import math
import sys
import tempfile
from pathlib import Path

import numpy as np

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent))

from analysis import (ABLATION_GRID, AblationRow, ablation_ordering, ablation_table,
                      compactness_ratio, embedding_rows, plot_embedding, project_pca,
                      prototype_usage_report, write_embedding_csv)
from errors import DataError
from model import EncoderConfig, ModelConfig, init_params


def test_ablation_rows_and_ordering():
    rows = [AblationRow(pm, de, [0, 1, 2], [3.0 - i, 3.5 - i, 2.5 - i]) for i, (pm, de) in enumerate(ABLATION_GRID)]
    assert [r.name for r in rows] == ["pm=off_de=off", "pm=on_de=off", "pm=on_de=on"]
    assert rows[0].median_cd_e4 == 3.0
    assert ablation_ordering(rows) == {'memory_helps': True, 'dual_encoders_help': True}

    table = ablation_table(rows)
    assert len(table) == 2 + 3
    assert "✓" in table[-1] and "✓" not in table[2]

    rows.reverse()
    rows = [AblationRow(pm, de, r.seeds, r.cd_e4) for (pm, de), r in zip(ABLATION_GRID, rows)]
    assert ablation_ordering(rows) == {'memory_helps': False, 'dual_encoders_help': False}
    assert math.isnan(AblationRow(True, True).median_cd_e4)


def test_compactness_ratio():
    rng = np.random.default_rng(0)
    partials = rng.normal(size=(12, 8))
    assert compactness_ratio(np.ones((4, 8)), partials) == 0.0
    assert math.isclose(compactness_ratio(0.5 * partials, partials), 0.5)

    # A single prototype has no spread
    assert compactness_ratio(np.ones((1, 8)), partials) == 0.0

    for prototypes, parts in ((partials, np.ones((5, 8))), (partials, partials[:1])):
        try:
            compactness_ratio(prototypes, parts)
            assert False, "expected DataError"
        except DataError:
            pass


def test_pca_preserves_planar_distances():
    rng = np.random.default_rng(1)
    basis, _ = np.linalg.qr(rng.normal(size=(8, 2)))
    flat = rng.normal(size=(14, 2))
    points = flat @ basis.T + 3.0
    coords, pca = project_pca(points[:10], points[10:])
    assert coords.shape == (14, 2)

    original = np.linalg.norm(points[:, None] - points[None], axis=2)
    projected = np.linalg.norm(coords[:, None] - coords[None], axis=2)
    assert np.allclose(original, projected, atol=1e-9)
    assert math.isclose(float(pca.explained_variance_ratio_.sum()), 1.0)

    again, _ = project_pca(points[:10], points[10:])
    assert np.array_equal(coords, again)


def test_pca_needs_three_features():
    try:
        project_pca(np.zeros((1, 4)), np.ones((1, 4)))
        assert False, "expected DataError"
    except DataError:
        pass


def test_embedding_csv():
    coords = np.arange(10, dtype=np.float64).reshape(5, 2)
    rows = embedding_rows(coords, [3, 7, 7], K=2)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "embedding.csv"
        write_embedding_csv(path, rows)
        with open(path, newline='') as f:
            read = list(csv.DictReader(f))
    assert [r['kind'] for r in read] == ["partial"] * 3 + ["prototype"] * 2
    assert [r['position_label'] for r in read] == ["3", "7", "7", "-1", "-1"]
    assert float(read[4]['pc2']) == 9.0


def test_prototype_usage_report():
    config = ModelConfig(encoder=EncoderConfig([3, 8, 8], 8), decoder_widths=[16, 8],
                         grid_side=6, num_points=16, K=4)
    model = init_params(config, seed=0)
    bank_rows = np.arange(32, dtype=np.float64).reshape(4, 8)
    model.memory.assign(bank_rows)

    partials = bank_rows[[0, 0, 1, 1, 2, 2, 3, 3]]
    report = prototype_usage_report(model, partials, [1, 1, 2, 2, 3, 3, 4, 4], tau=1.0)
    assert report['used_rows'] == 4
    assert [r['hits'] for r in report['rows']] == [2, 2, 2, 2]
    assert [r['majority_label'] for r in report['rows']] == [1, 2, 3, 4]
    assert report['weighted_purity'] == 1.0
    assert math.isclose(report['usage_entropy'], 1.0)
    assert report['alpha_mean'] == 1.0
    assert int(model.memory.usage.sum()) == 0

    mixed = prototype_usage_report(model, bank_rows[[0, 0, 0]], [1, 1, 2], tau=1.0)
    assert mixed['used_rows'] == 1 and mixed['usage_entropy'] == 0.0
    assert math.isclose(mixed['weighted_purity'], 2 / 3)


def test_plot_embedding():
    coords = np.random.default_rng(2).normal(size=(6, 2))
    with tempfile.TemporaryDirectory() as tmp:
        path = plot_embedding(Path(tmp) / "embedding.png", coords, [1, 2, 3, 4], K=2)
        # None when matplotlib is not installed
        assert path is None or path.stat().st_size > 0


def main():
    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_") and callable(fn)]
    print(f"Running {len(tests)} analysis tests")
    print("=" * 60)
    for name, fn in tests:
        fn()
        print(f"   ✓ {name}")
    print("\n✅ All analysis tests passed")


if __name__ == "__main__":
    main()
