"""
Synthetic rig generation, defect injection and the dataset loader
"""

import shutil

import numpy as np
import pytest
import yaml
from scipy.ndimage import map_coordinates

from data.dataset import (MultiViewSample, from_uint8, load_dataset, load_sample_dir, save_sample,
                          to_uint8)
from data.synthetic import (Defect, defect_area, draw_defect, generate_scene, inject_defect,
                            rig_homographies, visibility_coverage)
from geometry.homography import jacobian_det, project_point
from utils.config import DefectType, SceneConfig
from utils.errors import (ContaminatedTrainSplit, DefectOutOfBounds, ManifestMissing,
                          MaskLabelMismatch, MissingCalibration)


def _smooth_scene():
    return SceneConfig(num_views=3, image_size=32, texture={"octaves": 1, "jitter": 0.0})


def test_scene_is_pure_function_of_config(tiny_config):
    a = generate_scene(tiny_config.scene, 3)
    b = generate_scene(tiny_config.scene, 3)
    assert np.array_equal(a.sample.views, b.sample.views)
    c = generate_scene(tiny_config.scene, 4)
    assert not np.array_equal(a.sample.views, c.sample.views)


def test_views_are_quantized_and_in_range(tiny_config):
    views = generate_scene(tiny_config.scene, 0).sample.views
    assert views.shape == (3, 3, 32, 32)
    assert views.min() >= 0.0 and views.max() <= 1.0
    assert np.array_equal(from_uint8(to_uint8(views)), views)


def test_rig_homographies_warp_views_consistently():
    cfg = _smooth_scene()
    scene = generate_scene(cfg, 0)
    views = scene.sample.views
    size = cfg.image_size
    errors = []
    for (i, j), h in scene.homographies.items():
        for y in range(6, size - 6, 2):
            for x in range(6, size - 6, 2):
                u, v = project_point(h, (x, y))
                if not (0 <= u <= size - 1 and 0 <= v <= size - 1):
                    continue
                sampled = np.array([map_coordinates(views[j, c], [[v], [u]], order=1)[0] for c in range(3)])
                errors.append(np.abs(views[i, :, y, x] - sampled).max())
    assert len(errors) > 100
    # bilinear resampling of a smooth texture, quantized to 8 bits on both sides
    assert np.median(errors) <= 2 / 255


def test_poses_keep_most_of_the_plane_shared(tiny_config):
    poses, pairs = rig_homographies(tiny_config.scene)
    assert len(poses) == 3
    assert len(pairs) == 6
    assert visibility_coverage(poses, tiny_config.scene.image_size) > 0.8


def test_inject_defect_marks_consistent_masks(tiny_config):
    scene = generate_scene(tiny_config.scene, 7)
    defective = inject_defect(scene, tiny_config.scene, np.random.default_rng(1))
    sample = defective.sample
    sample.validate()
    assert sample.sample_label
    assert any(sample.view_labels)
    assert sample.masks.shape == (3, 32, 32)
    changed = np.abs(sample.views - scene.sample.views).max(axis=1) > 0
    assert changed[sample.masks].mean() > 0.5
    assert np.array_equal(defective.poses[0].h, scene.poses[0].h)


def test_inject_defect_size_range_zero_is_noop():
    cfg = SceneConfig(num_views=2, image_size=32, defect={"size_range": (0.0, 0.0)})
    scene = generate_scene(cfg, 0)
    assert inject_defect(scene, cfg, np.random.default_rng(0)) is scene


def test_inject_defect_out_of_bounds():
    cfg = SceneConfig(num_views=2, image_size=16)
    scene = generate_scene(cfg, 0)
    huge = Defect(kind=DefectType.BLOB, center=(8.0, 8.0), size=40.0, contrast=0.3)
    with pytest.raises(DefectOutOfBounds):
        inject_defect(scene, cfg, np.random.default_rng(0), defect=huge)


def test_draw_defect_places_defect_inside(tiny_config):
    rng = np.random.default_rng(5)
    for _ in range(50):
        defect = draw_defect(tiny_config.scene.defect, 32, rng)
        assert defect.extent <= defect.center[0] <= 31 - defect.extent
        assert defect.extent <= defect.center[1] <= 31 - defect.extent


def test_defect_area_of_round_blob():
    blob = Defect(kind=DefectType.BLOB, center=(16.0, 16.0), size=10.0, contrast=0.3)
    # disc of radius 5
    assert 70 <= defect_area(blob, 32) <= 90


@pytest.mark.parametrize("kind", [DefectType.BLOB, DefectType.MISSING])
def test_defect_area_per_view_follows_pose_jacobian(kind):
    cfg = SceneConfig(num_views=5, image_size=64, camera={"tilt": 0.0004})
    scene = generate_scene(cfg, 1)
    defect = Defect(kind=kind, center=(31.5, 31.5), size=10.0, contrast=0.3, angle=0.4)
    canonical = defect_area(defect, cfg.image_size)
    masks = inject_defect(scene, cfg, defect=defect).sample.masks
    for pose, mask in zip(scene.poses, masks):
        expected = canonical * jacobian_det(pose, defect.center)
        assert abs(mask.sum() - expected) <= 0.3 * expected


# ─────────────────────────────────────────────────────────────────────────────
# Dataset directory
# ─────────────────────────────────────────────────────────────────────────────

def test_generated_dataset_layout(tiny_dataset_dir):
    dataset = load_dataset(tiny_dataset_dir)
    assert dataset.count("train") == 4
    assert dataset.count("test") == 4
    assert dataset.sample_ids("test") == ["00004", "00005", "00006", "00007"]
    labels = [s.sample_label for s in dataset.iter_split("test")]
    assert labels == [False, False, True, True]
    assert all(not s.sample_label for s in dataset.iter_split("train"))
    assert set(dataset.homographies) == {(i, j) for i in range(3) for j in range(3) if i != j}


def test_generation_is_deterministic(tiny_config, tiny_dataset_dir, tmp_path):
    from data.synthetic import generate_dataset
    from geometry.view_graph import build_view_graph

    again = tmp_path / "again"
    generate_dataset(tiny_config.scene, tiny_config.data, again, build_view_graph(3, "ring"))
    for path in sorted(tiny_dataset_dir.rglob("*.png")):
        twin = again / path.relative_to(tiny_dataset_dir)
        assert path.read_bytes() == twin.read_bytes()
    assert (tiny_dataset_dir / "calibration.txt").read_text() == (again / "calibration.txt").read_text()


def test_sample_dir_round_trip(tmp_path, tiny_config):
    scene = inject_defect(generate_scene(tiny_config.scene, 2), tiny_config.scene, np.random.default_rng(3))
    save_sample(scene.sample, tmp_path / "s")
    loaded = load_sample_dir(tmp_path / "s", 3)
    assert np.array_equal(loaded.views, scene.sample.views)
    assert np.array_equal(loaded.masks, scene.sample.masks)
    assert loaded.view_labels == scene.sample.view_labels


def test_partial_masks_are_rejected(tmp_path, tiny_config):
    scene = inject_defect(generate_scene(tiny_config.scene, 2), tiny_config.scene, np.random.default_rng(3))
    save_sample(scene.sample, tmp_path / "s")
    (tmp_path / "s" / "mask_1.png").unlink()
    with pytest.raises(MaskLabelMismatch):
        load_sample_dir(tmp_path / "s", 3)


def test_label_invariants():
    views = np.zeros((2, 3, 4, 4), dtype=np.float32)
    masks = np.zeros((2, 4, 4), dtype=bool)
    masks[1, 2, 2] = True
    sample = MultiViewSample.from_masks(views, masks, "x")
    assert sample.view_labels == [False, True]
    assert sample.sample_label
    bad = MultiViewSample(views=views, masks=masks, view_labels=[True, True], sample_label=True)
    with pytest.raises(MaskLabelMismatch):
        bad.validate()


def test_contaminated_train_split(tiny_dataset_dir, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(tiny_dataset_dir, root)
    defective = root / "test" / "00006"
    train_dir = root / "train" / "00000"
    for mask in defective.glob("mask_*.png"):
        shutil.copy(mask, train_dir / mask.name)
    dataset = load_dataset(root)
    with pytest.raises(ContaminatedTrainSplit):
        list(dataset.iter_split("train"))


def test_missing_manifest_and_calibration(tiny_dataset_dir, tmp_path):
    with pytest.raises(ManifestMissing):
        load_dataset(tmp_path)
    root = tmp_path / "copy"
    shutil.copytree(tiny_dataset_dir, root)
    (root / "calibration.txt").unlink()
    with pytest.raises(MissingCalibration):
        load_dataset(root)


def test_manifest_label_mismatch(tiny_dataset_dir, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(tiny_dataset_dir, root)
    manifest = yaml.safe_load((root / "manifest.yaml").read_text())
    manifest["samples"]["test"][0]["label"] = True
    (root / "manifest.yaml").write_text(yaml.safe_dump(manifest))
    dataset = load_dataset(root)
    with pytest.raises(MaskLabelMismatch):
        dataset.load("test", 0)
