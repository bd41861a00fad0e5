"""
Memory bank, coreset selection, nearest-prototype scoring and bank files
"""

import warnings

import numpy as np
import pytest
import torch

from core.memory_bank import (MemoryBank, build_bank, coreset_target, exhaustive_distances,
                              flatten_positions, greedy_coreset, load_bank, nearest_distances,
                              save_bank, verify_search)
from core.scoring import aggregate, pixel_score, sample_score, score_sample, view_score
from utils.config import ScoreConfig
from utils.errors import (BankMismatchWarning, CorruptBankFile, EmptyFeatureSet, EmptyList,
                          EmptyMap, LevelMismatch)


def _features(rng, m=2, c=4, h=3, w=3):
    return rng.normal(size=(m, c, h, w)).astype(np.float32)


def _brute_greedy(x, target, start):
    """Textbook farthest-point selection with explicit loops."""
    selected = [start]
    while len(selected) < min(target, len(x)):
        best, best_d = None, -1.0
        for i in range(len(x)):
            d = min(np.linalg.norm(x[i] - x[s]) for s in selected)
            if d > best_d:
                best, best_d = i, d
        if best_d == 0.0:
            break
        selected.append(best)
    return selected


# ─────────────────────────────────────────────────────────────────────────────
# Building
# ─────────────────────────────────────────────────────────────────────────────

def test_flatten_positions_order():
    feats = np.arange(2 * 3 * 2 * 2, dtype=np.float32).reshape(2, 3, 2, 2)
    flat = flatten_positions(feats)
    assert flat.shape == (8, 3)
    # row = view * h * w + y * w + x
    assert np.array_equal(flat[1 * 4 + 1 * 2 + 0], feats[1, :, 1, 0])
    with pytest.raises(LevelMismatch):
        flatten_positions(np.zeros((3, 4)))


def test_full_bank_keeps_every_vector(rng):
    blocks = [flatten_positions(_features(rng)) for _ in range(3)]
    bank = build_bank({4: blocks, 3: blocks}, ScoreConfig(levels=[4, 3]))
    assert bank.level_ids == [4, 3]
    assert bank.size(4) == 3 * 18
    assert np.array_equal(bank.levels[4], np.concatenate(blocks))


def test_bank_requires_features(rng):
    with pytest.raises(EmptyFeatureSet):
        build_bank({3: [flatten_positions(_features(rng))]}, ScoreConfig(levels=[4]))
    with pytest.raises(EmptyFeatureSet):
        build_bank({4: [np.zeros((0, 4), dtype=np.float32)]}, ScoreConfig(levels=[4]))
    with pytest.raises(LevelMismatch):
        build_bank({4: [np.zeros((2, 4)), np.zeros((2, 5))]}, ScoreConfig(levels=[4]))


def test_coreset_target_rounding():
    assert coreset_target(100, 0.1) == 10
    assert coreset_target(101, 0.1) == 11
    assert coreset_target(5, 0.01) == 1


def test_greedy_coreset_matches_brute_force(rng):
    x = rng.normal(size=(60, 5))
    for start in (0, 17):
        assert greedy_coreset(x, 12, start) == _brute_greedy(x, 12, start)


def test_greedy_coreset_stops_on_duplicates():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    assert greedy_coreset(x, 4, 0) == [0, 1]


def test_coreset_bank_is_deterministic(rng):
    blocks = [flatten_positions(_features(rng, c=6)) for _ in range(4)]
    cfg = ScoreConfig(levels=[4], coreset_fraction=0.25, coreset_seed=3)
    first = build_bank({4: blocks}, cfg)
    second = build_bank({4: blocks}, cfg)
    assert first.size(4) == coreset_target(72, 0.25)
    assert first.equals(second)


# ─────────────────────────────────────────────────────────────────────────────
# Search and scoring
# ─────────────────────────────────────────────────────────────────────────────

def test_nearest_distances_match_exhaustive_scan(rng):
    prototypes = rng.normal(size=(50, 8))
    queries = rng.normal(size=(200, 8))
    fast = nearest_distances(queries, prototypes, k=3, chunk=64)
    slow = exhaustive_distances(queries, prototypes, k=3)
    assert torch.allclose(fast, slow, atol=1e-9)


def test_verify_search_passes_for_exact_search(rng):
    bank = MemoryBank({4: rng.normal(size=(30, 4)).astype(np.float32)})
    assert verify_search(bank, {4: rng.normal(size=(10, 4))}, k=2) <= 1e-6


def test_three_four_five_score():
    bank = MemoryBank({4: np.zeros((1, 2), dtype=np.float32)})
    feats = {4: np.array([3.0, 4.0], dtype=np.float32).reshape(1, 2, 1, 1)}
    maps = pixel_score(feats, bank, ScoreConfig(levels=[4], level_weights=[1.0]))
    assert maps.shape == (1, 1, 1)
    assert maps[0, 0, 0] == pytest.approx(5.0)


def test_bank_members_score_zero(rng):
    feats = {4: _features(rng, h=2, w=2), 3: _features(rng, c=6, h=4, w=4)}
    bank = build_bank({lvl: [flatten_positions(f)] for lvl, f in feats.items()}, ScoreConfig(levels=[4, 3]))
    maps = pixel_score(feats, bank, ScoreConfig(levels=[4, 3]), image_size=(8, 8))
    assert maps.shape == (2, 8, 8)
    assert np.abs(maps).max() <= 1e-9


def test_pixel_score_matches_weighted_brute_force(rng):
    feats = {4: _features(rng, c=4, h=4, w=4)}
    prototypes = rng.normal(size=(50, 4)).astype(np.float32)
    bank = MemoryBank({4: prototypes})
    cfg = ScoreConfig(levels=[4], level_weights=[2.5])
    maps = pixel_score(feats, bank, cfg)
    for v in range(2):
        for y in range(4):
            for x in range(4):
                q = feats[4][v, :, y, x].astype(np.float64)
                d = min(np.linalg.norm(q - p.astype(np.float64)) for p in prototypes)
                assert maps[v, y, x] == pytest.approx(2.5 * d, abs=1e-9)


def test_coarse_levels_are_upsampled_corner_aligned():
    bank = MemoryBank({4: np.zeros((1, 1), dtype=np.float32)})
    feats = {4: np.array([[[[0.0, 2.0]]]], dtype=np.float32)}
    maps = pixel_score(feats, bank, ScoreConfig(levels=[4], level_weights=[1.0]), image_size=(1, 3))
    assert np.allclose(maps[0, 0], [0.0, 1.0, 2.0])


def test_score_monotonicity_and_weight_linearity(rng):
    feats = {4: _features(rng, h=3, w=3)}
    small = MemoryBank({4: rng.normal(size=(5, 4)).astype(np.float32)})
    larger = MemoryBank({4: np.concatenate([small.levels[4], rng.normal(size=(20, 4)).astype(np.float32)])})
    cfg = ScoreConfig(levels=[4], level_weights=[1.0])
    assert np.all(pixel_score(feats, larger, cfg) <= pixel_score(feats, small, cfg) + 1e-12)
    scaled = pixel_score(feats, small, ScoreConfig(levels=[4], level_weights=[3.0]))
    assert np.allclose(scaled, 3.0 * pixel_score(feats, small, cfg), atol=1e-12)


def test_pixel_score_level_errors(rng):
    bank = MemoryBank({4: np.zeros((3, 4), dtype=np.float32)})
    with pytest.raises(LevelMismatch):
        pixel_score({3: _features(rng)}, bank, ScoreConfig(levels=[3]))
    with pytest.raises(LevelMismatch):
        pixel_score({4: _features(rng, c=5)}, bank, ScoreConfig(levels=[4]))


def test_view_and_sample_scores():
    assert view_score(np.full((4, 4), 2.5)) == 2.5
    spike = np.zeros((5, 5))
    spike[2, 3] = 7.0
    assert view_score(spike) == 7.0
    assert sample_score([0.1, 0.9, 0.3]) == 0.9
    with pytest.raises(EmptyMap):
        view_score(np.zeros((0, 3)))
    with pytest.raises(EmptyList):
        sample_score([])
    scores = aggregate(np.stack([np.zeros((2, 2)), spike[:2, :2] + 1.0]))
    assert scores.view_scores == [0.0, 1.0]
    assert scores.sample_score == 1.0


def test_score_sample_with_smoothing_keeps_shape(rng):
    feats = {4: _features(rng, h=4, w=4)}
    bank = MemoryBank({4: rng.normal(size=(10, 4)).astype(np.float32)})
    result = score_sample(feats, bank, ScoreConfig(levels=[4], gaussian_sigma=1.0), (16, 16))
    assert result.pixel_maps.shape == (2, 16, 16)
    assert len(result.view_scores) == 2


# ─────────────────────────────────────────────────────────────────────────────
# Bank files
# ─────────────────────────────────────────────────────────────────────────────

def _bank(rng):
    return MemoryBank({4: rng.normal(size=(7, 4)).astype(np.float32),
                       3: rng.normal(size=(9, 6)).astype(np.float32)},
                      {"checkpoint_hash": "abc", "levels": [4, 3], "radius": 3})


def test_bank_file_round_trip(tmp_path, rng):
    bank = _bank(rng)
    save_bank(bank, tmp_path / "bank.bin")
    loaded = load_bank(tmp_path / "bank.bin", expected_hash="abc")
    assert loaded.equals(bank)


def test_truncated_or_tampered_bank_is_corrupt(tmp_path, rng):
    path = tmp_path / "bank.bin"
    save_bank(_bank(rng), path)
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(CorruptBankFile):
        load_bank(path)
    tampered = bytearray(data)
    tampered[40] ^= 0xFF
    path.write_bytes(bytes(tampered))
    with pytest.raises(CorruptBankFile):
        load_bank(path)
    path.write_bytes(b"NOTABANK" + data[8:])
    with pytest.raises(CorruptBankFile):
        load_bank(path)


def test_foreign_checkpoint_only_warns(tmp_path, rng):
    path = tmp_path / "bank.bin"
    save_bank(_bank(rng), path)
    with pytest.warns(BankMismatchWarning):
        bank = load_bank(path, expected_hash="different")
    assert bank.size(4) == 7
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load_bank(path, expected_hash="abc")
