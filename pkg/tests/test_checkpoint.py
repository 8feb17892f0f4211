import numpy as np
import pytest

from promptmap.backbone import VisionTransformer, freeze_for_prompt_tuning
from promptmap.checkpoint import load_checkpoint, restore, save_checkpoint
from promptmap.errors import DimensionError, ValidationError
from promptmap.numerics import no_grad
from promptmap.prompting import DualPathwayModel, PromptConfig


def _model(cfg, seed):
    m = DualPathwayModel(VisionTransformer(cfg, np.random.default_rng(seed)), PromptConfig(), 3,
                         np.random.default_rng(seed + 1))
    freeze_for_prompt_tuning(m)
    return m


def test_roundtrip_is_bit_exact(tiny_cfg, tmp_path):
    a, b = _model(tiny_cfg, 0), _model(tiny_cfg, 5)
    for p in b.parameters():
        p.requires_grad = True
    path = save_checkpoint(tmp_path / "x" / "ck.safetensors", a, "sa2vp", {"seed": 0}, {"epoch": 2})
    ck = load_checkpoint(path)
    assert ck.method == "sa2vp" and ck.config == {"seed": 0} and ck.extra == {"epoch": 2}
    restore(b, ck)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data) and pa.requires_grad == pb.requires_grad
    images = np.random.default_rng(3).uniform(size=(2, 3, 8, 8))
    with no_grad():
        assert np.array_equal(a(images)[0].data, b(images)[0].data)
    assert set(ck.labels.values()) == {"frozen", "tunable"}


def test_backbone_state_feeds_a_bare_backbone(tiny_cfg, tmp_path):
    a = _model(tiny_cfg, 0)
    ck = load_checkpoint(save_checkpoint(tmp_path / "ck.safetensors", a, "sa2vp"))
    vit = VisionTransformer(tiny_cfg, np.random.default_rng(9))
    vit.load_state_dict(ck.backbone_state())
    assert np.array_equal(vit.pos_embed.data, a.backbone.pos_embed.data)


def test_shape_mismatch(tiny_cfg, tmp_path):
    ck = load_checkpoint(save_checkpoint(tmp_path / "ck.safetensors", _model(tiny_cfg, 0), "sa2vp"))
    other = tiny_cfg.__class__(image_size=8, patch_size=4, embed_dim=32, num_layers=2, num_heads=2)
    with pytest.raises(DimensionError):
        VisionTransformer(other, np.random.default_rng(0)).load_state_dict(ck.backbone_state())


def test_missing_and_corrupt_files(tmp_path):
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "none.safetensors")
    junk = tmp_path / "junk.safetensors"
    junk.write_bytes(b"\x00" * 64)
    with pytest.raises(ValidationError):
        load_checkpoint(junk)
