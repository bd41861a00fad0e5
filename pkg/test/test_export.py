"""
Anomaly map and feature export
"""

import numpy as np
import pytest
from PIL import Image

from core.evaluation import EvalReport
from utils.export import (comparison_table, export_anomaly_map, export_features_csv, normalize_map, overlay,
                          read_features_csv, read_pfm, write_comparison, write_pfm, write_report)
from utils.errors import ShapeMismatch


def test_pfm_keeps_float32_values_exactly(tmp_path, rng):
    values = rng.normal(size=(5, 7)).astype(np.float32)
    write_pfm(tmp_path / "m.pfm", values)
    assert np.array_equal(read_pfm(tmp_path / "m.pfm"), values)
    raw = (tmp_path / "m.pfm").read_bytes()
    assert raw.startswith(b"Pf\n7 5\n-1.0\n")
    # first stored row is the bottom image row
    assert np.frombuffer(raw[len(b"Pf\n7 5\n-1.0\n"):][:28], dtype="<f4").tolist() == values[-1].tolist()


def test_pfm_rejects_non_maps(tmp_path):
    with pytest.raises(ShapeMismatch):
        write_pfm(tmp_path / "m.pfm", np.zeros((2, 3, 3)))


def test_normalize_constant_map_is_zero():
    assert np.array_equal(normalize_map(np.full((3, 3), 4.2)), np.zeros((3, 3)))
    assert normalize_map(np.array([[1.0, 3.0]])).tolist() == [[0.0, 1.0]]


def test_overlay_of_constant_map_blends_lowest_colour():
    image = np.full((3, 4, 4), 0.5)
    out = overlay(np.ones((4, 4)), image)
    assert out.shape == (4, 4, 3)
    assert out.dtype == np.uint8
    assert np.all(out == out[0, 0])
    with pytest.raises(ShapeMismatch):
        overlay(np.ones((3, 3)), image)


def test_export_anomaly_map_writes_both_files(tmp_path, rng):
    anomaly = rng.random((8, 8))
    pfm, png = export_anomaly_map(anomaly, rng.random((3, 8, 8)), tmp_path / "maps" / "view_0")
    assert pfm.name == "view_0.pfm" and png.name == "view_0.png"
    assert np.allclose(read_pfm(pfm), anomaly.astype(np.float32))
    with Image.open(png) as img:
        assert img.size == (8, 8) and img.mode == "RGB"


def test_features_csv_layout(tmp_path, rng):
    features = {"00004": {4: rng.normal(size=(2, 3, 2, 2)).astype(np.float32),
                          3: rng.normal(size=(2, 2, 3, 3)).astype(np.float32)}}
    rows = export_features_csv(features, tmp_path / "f.csv")
    assert rows == 2 * 2 * 2 + 2 * 3 * 3
    header = (tmp_path / "f.csv").read_text().splitlines()[0]
    assert header == "sample,view,level,row,col,v0,v1,v2"
    back = read_features_csv(tmp_path / "f.csv")
    assert np.allclose(back["00004"][4], features["00004"][4])
    assert np.allclose(back["00004"][3], features["00004"][3])


def test_report_and_comparison_files(tmp_path):
    report = EvalReport(0.91, 0.8, None, counts={"samples": 4})
    text, csv = write_report(report, tmp_path)
    assert "s_auroc: n/a" in text.read_text()
    assert csv.read_text().splitlines()[0].startswith("category,p_auroc,v_auroc,s_auroc")
    frame = comparison_table("lambda", [0.0, 0.1], [report, report])
    csv_path, txt_path = write_comparison(frame, tmp_path, "sweep_lambda")
    assert csv_path.name == "sweep_lambda.csv"
    assert "n/a" in txt_path.read_text()
