import json

import numpy as np
import pytest

from hardmine.data import (
    GridSpec,
    SceneSpec,
    build_targets,
    generate_dataset,
    load_dataset,
    load_ground_truth,
    read_pgm,
    save_dataset,
    stack_targets,
    write_pgm,
)
from hardmine.errors import ConfigError, DataError


def test_generation_is_deterministic():
    a = generate_dataset(SceneSpec(seed=7), 3)
    b = generate_dataset(SceneSpec(seed=7), 3)
    for fa, fb in zip(a, b):
        assert fa.image.tobytes() == fb.image.tobytes()
        assert fa.box == fb.box
    c = generate_dataset(SceneSpec(seed=8), 3)
    assert any(fa.image.tobytes() != fc.image.tobytes() for fa, fc in zip(a, c))


def test_no_targets_when_presence_zero():
    frames = generate_dataset(SceneSpec(presence_prob=0.0), 50)
    assert all(f.box is None for f in frames)


def test_every_box_inside_image():
    spec = SceneSpec(presence_prob=1.0, seed=11)
    frames = generate_dataset(spec, 512)
    assert len(frames) == 512
    for f in frames:
        x1, y1, x2, y2 = f.box
        assert 0 <= x1 < x2 <= spec.image_size and 0 <= y1 < y2 <= spec.image_size
        assert spec.size_min <= x2 - x1 <= spec.size_max
        assert f.image.shape == (spec.image_size, spec.image_size) and f.image.dtype == np.uint8


def test_target_is_visible():
    spec = SceneSpec(presence_prob=1.0, distractors_max=0, noise=0.0, seed=3)
    for f in generate_dataset(spec, 20):
        x1, y1, x2, y2 = (int(v) for v in f.box)
        inside = f.image[y1:y2, x1:x2].astype(int)
        outside = np.delete(f.image.ravel(), np.ravel_multi_index(np.mgrid[y1:y2, x1:x2].reshape(2, -1), f.image.shape))
        assert inside.max() > outside.astype(int).max()


@pytest.mark.parametrize(
    "kw",
    [{"size_max": 80, "size_min": 10}, {"presence_prob": 1.5}, {"size_min": 30, "size_max": 20}, {"noise": -1.0}],
)
def test_unsatisfiable_spec(kw):
    with pytest.raises(ConfigError):
        generate_dataset(SceneSpec(**kw), 1)


def test_count_must_be_positive():
    with pytest.raises(ConfigError):
        generate_dataset(SceneSpec(), 0)


class TestTargets:
    grid = GridSpec()

    def test_centered_box(self):
        targets = build_targets((24.0, 24.0, 40.0, 40.0), self.grid)
        coarse = targets[2].t
        assert coarse.sum() == 1
        assert coarse[1, 1] == 1

    def test_center_arithmetic(self):
        targets = build_targets((6.0, 6.0, 14.0, 14.0), self.grid)  # center (10, 10), stride 8
        assert np.argwhere(targets[0].t).tolist() == [[1, 1]]
        np.testing.assert_allclose(targets[0].box[1, 1], [0.25, 0.25, 0.0, 0.0])

    def test_empty_frame(self):
        for st in build_targets(None, self.grid):
            assert st.t.sum() == 0 and not st.box.any()

    def test_out_of_bounds(self):
        with pytest.raises(DataError):
            build_targets((60.0, 60.0, 70.0, 70.0), self.grid)

    def test_consistency_over_dataset(self):
        frames = generate_dataset(SceneSpec(seed=5), 200)
        per_scale = stack_targets(frames, self.grid)
        for k, f in enumerate(frames):
            counts = [int(t[k].sum()) for t, _ in per_scale]
            assert counts == ([1, 1, 1] if f.box is not None else [0, 0, 0])

    def test_imbalance_ratio(self):
        frames = generate_dataset(SceneSpec(seed=5), 200)
        per_scale = stack_targets(frames, self.grid)
        pos = sum(int(t.sum()) for t, _ in per_scale)
        neg = sum(t.size for t, _ in per_scale) - pos
        assert self.grid.num_cells == 84
        assert neg / pos >= 25


def test_grid_spec_validation():
    assert GridSpec().strides == (8, 16, 32)
    with pytest.raises(ConfigError):
        GridSpec(sizes=(8, 4))
    with pytest.raises(ConfigError):
        GridSpec(image_size=64, sizes=(7, 4, 2))


def test_pgm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(13, 17), dtype=np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)


def test_dataset_roundtrip(tmp_path):
    spec = SceneSpec(seed=2)
    frames = generate_dataset(spec, 10)
    save_dataset(frames, tmp_path / "ds", spec)
    loaded = load_dataset(tmp_path / "ds")
    assert [f.frame_id for f in loaded] == [f.frame_id for f in frames]
    for a, b in zip(frames, loaded):
        assert np.array_equal(a.image, b.image) and a.box == b.box
    lines = (tmp_path / "ds" / "gt.jsonl").read_text().splitlines()
    assert len(lines) == 10
    rec = json.loads(lines[0])
    assert set(rec) == {"frame_id", "box"}
    assert json.loads((tmp_path / "ds" / "scene.json").read_text())["seed"] == 2


def test_missing_image(tmp_path):
    frames = generate_dataset(SceneSpec(), 2)
    save_dataset(frames, tmp_path)
    (tmp_path / "frames" / "000001.pgm").unlink()
    with pytest.raises(DataError, match="missing image"):
        load_dataset(tmp_path)


def test_bad_gt_box(tmp_path):
    (tmp_path / "gt.jsonl").write_text('{"frame_id": 0, "box": [5, 5, 1, 9]}\n')
    with pytest.raises(DataError):
        load_ground_truth(tmp_path / "gt.jsonl")
