import numpy as np
import pytest

from hardmine.data import GridSpec, SceneSpec, generate_dataset, images_array
from hardmine.detector import GridDetector, sigmoid
from hardmine.errors import ConfigError, DataError


@pytest.fixture(scope="module")
def images():
    return images_array(generate_dataset(SceneSpec(seed=1), 4))


def test_output_shapes(images):
    grid = GridSpec()
    heads, _ = GridDetector(grid, seed=0).forward(images)
    assert [h.shape for h in heads] == [(4, g, g, 5) for g in grid.sizes]


def test_other_grid():
    grid = GridSpec(image_size=32, sizes=(8, 4, 2))
    model = GridDetector(grid, channels=(8, 8, 8, 8), seed=0)
    heads, _ = model.forward(np.zeros((2, 32, 32)))
    assert [h.shape[1:3] for h in heads] == [(8, 8), (4, 4), (2, 2)]


def test_unsupported_grid():
    with pytest.raises(ConfigError):
        GridDetector(GridSpec(image_size=48, sizes=(8, 4, 2)))  # stride 6
    with pytest.raises(ConfigError):
        GridDetector(GridSpec(), channels=(8, 8))


def test_objectness_near_half_before_training(images):
    model = GridDetector(GridSpec(), seed=3)
    assert not model.view("head0.b").any()
    heads, _ = model.forward(images)
    for raw in heads:
        p = sigmoid(raw[..., 0])
        assert np.all((p > 0) & (p < 1))
        assert np.abs(p - 0.5).max() < 0.05


def test_forward_deterministic(images):
    model = GridDetector(GridSpec(), seed=4)
    a, _ = model.forward(images)
    b, _ = model.forward(images)
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()


def test_shape_mismatch():
    model = GridDetector(GridSpec(), seed=0)
    with pytest.raises(DataError):
        model.forward(np.zeros((1, 32, 32)))
    with pytest.raises(DataError):
        model.forward(np.zeros((1, 3, 64, 64)))


def test_parameter_budget():
    assert GridDetector(GridSpec()).num_params <= 20_000


def test_backward_matches_finite_differences(images):
    model = GridDetector(GridSpec(), seed=5)
    rng = np.random.default_rng(0)
    weights = [rng.normal(size=(4, g, g, 5)) for g in model.grid.sizes]

    def f(theta):
        heads, _ = model.forward(images, theta)
        return sum(float((w * h).sum()) for w, h in zip(weights, heads))

    _, cache = model.forward(images)
    grad = model.backward(weights, cache)
    h = 1e-6
    for i in rng.choice(model.num_params, 60, replace=False):
        e = np.zeros(model.num_params)
        e[i] = h
        numeric = (f(model.params + e) - f(model.params - e)) / (2 * h)
        assert abs(numeric - grad[i]) <= 1e-6 * max(1.0, abs(grad[i]))


def test_decode_boxes_inside_image(images):
    model = GridDetector(GridSpec(), seed=6)
    heads, _ = model.forward(images)
    for p, boxes in model.decode(heads):
        assert boxes.min() >= 0 and boxes.max() <= 64
        assert np.all(boxes[..., 2] > boxes[..., 0]) and np.all(boxes[..., 3] > boxes[..., 1])


def test_save_load_roundtrip(tmp_path):
    model = GridDetector(GridSpec(), seed=9)
    model.save(tmp_path / "m.bin", seed=9, variant="combined")
    loaded, header = GridDetector.load(tmp_path / "m.bin")
    assert np.array_equal(loaded.params, model.params)
    assert header["param_count"] == model.num_params
    assert header["grid"] == {"image_size": 64, "sizes": [8, 4, 2]}
    assert header["seed"] == 9
    loaded.save(tmp_path / "m2.bin", seed=9, variant="combined")
    assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "m2.bin").read_bytes()


def test_load_rejects_garbage(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nope")
    with pytest.raises(DataError):
        GridDetector.load(tmp_path / "x.bin")
