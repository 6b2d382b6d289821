import json
import math

import numpy as np
import pytest

import coperc


def test_rotated_iou_half_overlap():
    assert coperc.rotated_iou((0, 0, 1, 1, 0), (0.5, 0, 1, 1, 0)) == pytest.approx(1 / 3, abs=1e-12)
    assert coperc.rotated_iou((0, 0, 2, 2, 0), (5, 5, 1, 1, 0)) == 0.0


def test_average_precision_and_nms():
    gt = [(0, 0, 4, 2, 0)]
    r = coperc.average_precision([([((0, 0, 4, 2, 0), 0.9), ((10, 0, 4, 2, 0), 0.5)], gt)], 0.5)
    assert r["ap"] == pytest.approx(1.0)
    assert r["true_positives"] == 1 and r["false_positives"] == 1
    kept = coperc.nms([((0, 0, 4, 2, 0), 0.9), ((0.1, 0, 4, 2, 0), 0.8), ((10, 0, 4, 2, 0), 0.7)], 0.3)
    assert [s for _, s in kept] == [0.9, 0.7]


def test_gradient_count_law():
    hwd = 16 * 16 * 8
    for n in (1, 2, 5):
        assert coperc.encoder_grad_slots("attention", 5, n) == n * hwd
        assert coperc.encoder_grad_slots("maxout", 5, n) <= hwd


def test_parse_control():
    assert coperc.parse_control('{"v":1,"kind":"step","count":3}') == {"v": 1, "kind": "step", "count": 3}
    with pytest.raises(ValueError):
        coperc.parse_control('{"v":2,"kind":"start"}')


def test_generate_load_and_run(tmp_path):
    data = tmp_path / "data"
    metas = [coperc.generate(seed, data, frames=2) for seed in (3, 4)]
    assert sorted(coperc.list_meta_files(data)) == sorted(metas)
    frames = coperc.load_frames(metas)
    assert len(frames) == 4
    f = frames[0]
    assert len(f["cavs"]) == 3
    pts = f["cavs"][0]["points"]
    assert isinstance(pts, np.ndarray) and pts.shape[1] == 3 and pts.shape[0] > 0
    # float32 on disk
    assert np.all(pts.astype(np.float32).astype(np.float64) == pts)

    cfg = f"epochs = 1\nngrad = 1\ntrain_data = {data}\ntest_data = {data}\nout_dir = {tmp_path / 'out'}\n"
    summary = coperc.run("train", cfg)
    assert summary["mode"] == "train" and summary["epochs"] == 1
    assert math.isfinite(summary["final_loss"])
    lines = [json.loads(l) for l in (tmp_path / "out" / "metrics.jsonl").read_text().splitlines()]
    assert lines and lines[-1]["kind"] == "epoch"
    report = coperc.run("test", cfg)
    assert 0.0 <= report["ap50"]["ap"] <= 1.0 and report["frames"] == 4
    assert coperc.run("vis", cfg)["frames"] == 4


def test_config_errors():
    assert "epochs = 3" in coperc.normalize_config("epochs = 3\n")
    with pytest.raises(ValueError, match="line 1"):
        coperc.normalize_config("bogus = 1\n")
