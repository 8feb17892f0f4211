import numpy as np
import pytest

from promptmap.analysis import aligned, cosine_map, read_matrix, salient_token, similarity_map, write_matrix
from promptmap.backbone import VisionTransformer
from promptmap.errors import ValidationError
from promptmap.numerics import no_grad
from promptmap.prompting import DualPathwayModel, LinearProbeModel, PromptConfig


def test_self_similarity_peaks_at_the_salient_coordinate(rng):
    grid = rng.normal(size=(4, 4, 8))
    idx = salient_token(grid.reshape(16, 8))
    m = cosine_map(grid.reshape(16, 8)[idx], grid)
    assert np.unravel_index(np.argmax(m), m.shape) == divmod(idx, 4)
    assert abs(m.flat[idx] - 1.0) < 1e-12


def test_orthogonal_grid_gives_zero_map():
    token = np.zeros(6)
    token[0] = 2.0
    grid = np.zeros((3, 3, 6))
    grid[..., 1:] = 1.0
    assert np.abs(cosine_map(token, grid)).max() < 1e-12


def test_similarity_map_on_model(toy_cfg):
    # gamma=0 keeps the base pathway independent of the prompt maps
    model = DualPathwayModel(VisionTransformer(toy_cfg, np.random.default_rng(0)), PromptConfig(gamma=0.0), 4,
                             np.random.default_rng(1))
    image = np.random.default_rng(2).uniform(size=(3, 32, 32))
    with no_grad():
        base = model.encode(image[None]).base.data[0]
    # a prompt map equal to the final image map makes the peak sit on the salient token
    model.prompt.maps["0"].tokens.data[...] = base.reshape(4, 4, -1)
    m, coord = similarity_map(model, image)
    assert m.shape == (4, 4)
    assert abs(m[coord] - 1.0) < 1e-12


def test_similarity_map_rejects_other_methods(toy_cfg):
    probe = LinearProbeModel(VisionTransformer(toy_cfg, np.random.default_rng(0)), 4)
    with pytest.raises(ValidationError):
        similarity_map(probe, np.zeros((3, 32, 32)))


def test_aligned_rule():
    assert aligned((2, 2), (3, 3), 1, 1)
    assert not aligned((2, 2), (4, 2), 1, 1)
    assert aligned((5, 5), (2, 2), 2, 1)
    assert aligned((0, 0), (2, 0), 1, 3)


def test_matrix_file_roundtrip(tmp_path, rng):
    m = rng.uniform(-1, 1, size=(3, 5))
    back = read_matrix(write_matrix(tmp_path / "m.txt", m))
    assert np.max(np.abs(back - m)) <= 5e-7
