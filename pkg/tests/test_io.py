import json

import numpy as np
import pytest

from oovkit.io import (
    JsonlError,
    detection_from_record,
    detection_to_record,
    ground_truth_from_record,
    ground_truth_to_record,
    labeled_embedding_from_record,
    labeled_embedding_to_record,
    load_config,
    read_jsonl,
    save_config,
    write_jsonl,
)
from oovkit.types import DetectionRecord, GroundTruthRecord, LabeledEmbedding, RunConfig


def test_jsonl_roundtrip(tmp_path):
    path = tmp_path / "records.jsonl"
    write_jsonl(path, [{"a": 1}, {"b": [1.5, 2.5]}])
    assert list(read_jsonl(path)) == [{"a": 1}, {"b": [1.5, 2.5]}]


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"ok": 1}\n{not json}\n')
    with pytest.raises(JsonlError) as err:
        list(read_jsonl(path))
    assert err.value.line_number == 2


def test_non_object_line_rejected(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("[1, 2]\n")
    with pytest.raises(JsonlError):
        list(read_jsonl(path))


def test_labeled_embedding_roundtrip():
    e = LabeledEmbedding(values=[0.25, -1.5], class_index=2, role="background")
    back = labeled_embedding_from_record(labeled_embedding_to_record(e))
    assert back.class_index == 2 and back.role == "background"
    np.testing.assert_array_equal(back.values, e.values)


def test_detection_roundtrip_exact():
    det = DetectionRecord(
        box=(0.0, 0.0, 10.0, 10.0),
        scores=[1 / 3, 0.5, 1 / 6],
        predicted_label=1,
        image_id="img0",
    )
    back = detection_from_record(json.loads(json.dumps(detection_to_record(det))))
    assert back.box == det.box
    np.testing.assert_array_equal(back.scores, det.scores)
    assert back.predicted_label == det.predicted_label
    assert back.image_id == det.image_id


def test_ground_truth_roundtrip():
    gt = GroundTruthRecord(box=(1, 2, 3, 4), class_index=5, image_id="x")
    back = ground_truth_from_record(ground_truth_to_record(gt))
    assert back.box == gt.box and back.class_index == 5 and back.image_id == "x"


def test_field_names_are_exact():
    det = DetectionRecord(box=(0, 0, 1, 1), scores=[0.9, 0.1], predicted_label=0, image_id="a")
    rec = detection_to_record(det)
    assert set(rec) == {"box", "scores", "predicted_label", "image_id"}
    e = LabeledEmbedding(values=[1.0], class_index=0)
    assert set(labeled_embedding_to_record(e)) == {"values", "class_index", "role"}


def test_config_json_roundtrip(tmp_path):
    cfg = RunConfig(seed=9, h=0.5, fg_bg_ratio=(1, 2))
    path = tmp_path / "cfg.json"
    save_config(path, cfg)
    assert load_config(path) == cfg


def test_config_toml(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text('seed = 4\nh = 0.7\nfg_bg_ratio = [1, 3]\n')
    cfg = load_config(path)
    assert cfg.seed == 4 and cfg.h == 0.7 and cfg.fg_bg_ratio == (1, 3)


def test_config_unknown_key_rejected(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{"seed": 1, "mystery": true}')
    with pytest.raises(ValueError, match="unknown config keys"):
        load_config(path)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    path = tmp_path / "out.jsonl"
    write_jsonl(path, [{"a": 1}])
    assert [p.name for p in tmp_path.iterdir()] == ["out.jsonl"]
