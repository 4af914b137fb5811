import math

import numpy as np
import pytest
import torch

from sounding_loc.errors import ShapeError, StateError
from sounding_loc.models import (
    AVModel,
    AudioNet,
    BackboneConfig,
    LocalizationHead,
    VisualNet,
    audio_forward,
    load_checkpoint,
    load_pretrained,
    localize,
    save_checkpoint,
    visual_forward,
)


@pytest.fixture(scope="module")
def toy():
    torch.manual_seed(0)
    return AVModel(4).eval()


def test_toy_shapes(toy):
    f = visual_forward(np.random.default_rng(0).random((112, 112, 3)), toy.visual)
    assert tuple(f.shape) == (64, 14, 14)
    a = audio_forward(np.zeros((201, 64)), toy.audio)
    assert tuple(a.shape) == (64,)
    assert tuple(toy.audio(torch.zeros(1, 201, 64)).shape) == (1, 64, 26, 8)


def test_paper_profile_shapes():
    torch.manual_seed(0)
    v = VisualNet(BackboneConfig.paper(3)).eval()
    a = AudioNet(BackboneConfig.paper(1)).eval()
    with torch.no_grad():
        assert tuple(v(torch.zeros(1, 3, 224, 224)).shape) == (1, 512, 14, 14)
        assert tuple(a.embed(torch.zeros(1, 201, 64)).shape) == (1, 512)


def test_wrong_input_sizes(toy):
    with pytest.raises(ShapeError):
        toy.visual(torch.zeros(1, 3, 100, 100))
    with pytest.raises(ShapeError):
        toy.audio(torch.zeros(1, 200, 64))
    with pytest.raises(ShapeError):
        audio_forward(np.zeros((2, 201, 64)), toy.audio)


def test_identical_frames_identical_features(toy):
    x = torch.rand(1, 3, 112, 112)
    with torch.no_grad():
        out = toy.visual(torch.cat([x, x]))
    assert torch.equal(out[0], out[1])


def test_gmp_contract(toy):
    x = torch.randn(2, 201, 64)
    with torch.no_grad():
        pre = toy.audio(x)
        emb = toy.audio.embed(x)
    assert torch.equal(emb, pre.flatten(2).max(2).values)


def _head_with_identity_affine(C=8):
    head = LocalizationHead(C, dim=4, init_scale=1.0, init_bias=0.0)
    return head


def test_parallel_vectors_give_sigmoid_one():
    head = _head_with_identity_affine()
    torch.manual_seed(0)
    a = torch.rand(8)
    # the same input through identical projections makes every cosine 1
    head.visual_proj[0].weight.data = head.audio_proj[0].weight.data[:, :, None, None].clone()
    head.visual_proj[0].bias.data = head.audio_proj[0].bias.data.clone()
    head.visual_proj[2].weight.data = head.audio_proj[2].weight.data[:, :, None, None].clone()
    head.visual_proj[2].bias.data = head.audio_proj[2].bias.data.clone()
    f = a[:, None, None].expand(8, 14, 14).contiguous()
    with torch.no_grad():
        m, s = localize(a, f, head)
    expected = 1 / (1 + math.exp(-1))
    assert torch.allclose(m, torch.full((14, 14), expected), atol=1e-6)
    assert abs(float(s) - 0.7310585786) < 1e-6


def test_orthogonal_and_zero_vectors_give_half():
    head = _head_with_identity_affine()
    with torch.no_grad():
        cos = head.similarity(torch.zeros(1, 8), torch.zeros(1, 8, 3, 3))
        m, _ = head(torch.zeros(1, 8), torch.zeros(1, 8, 3, 3))
    # zero projections are orthogonal to everything: cosine 0, map 0.5
    for p in list(head.audio_proj.parameters()) + list(head.visual_proj.parameters()):
        p.data.zero_()
    with torch.no_grad():
        m0, _ = head(torch.ones(1, 8), torch.ones(1, 8, 3, 3))
    assert torch.equal(m0, torch.full((1, 3, 3), 0.5))
    assert torch.isfinite(cos).all() and torch.isfinite(m).all()


def test_score_is_map_max(toy):
    torch.manual_seed(3)
    with torch.no_grad():
        maps, score = toy.head(torch.randn(5, 64), torch.randn(5, 64, 14, 14))
    for b in range(5):
        assert float(score[b]) == max(float(v) for v in maps[b].flatten())


def test_head_dim_mismatch():
    head = LocalizationHead(8)
    with pytest.raises(ShapeError):
        head.similarity(torch.zeros(1, 7), torch.zeros(1, 8, 2, 2))


def test_backbone_config_validation():
    with pytest.raises(ShapeError):
        BackboneConfig(profile="huge")
    with pytest.raises(ShapeError):
        BackboneConfig(widths=(8,), strides=(1, 2))
    with pytest.raises(ShapeError):
        BackboneConfig(widths=(16, 32, 64, 32))


def test_checkpoint_round_trip(tmp_path, toy):
    save_checkpoint(tmp_path / "m.pt", toy, {"stage": 1})
    model, extra = load_checkpoint(tmp_path / "m.pt")
    assert extra == {"stage": 1}
    for (k, a), (_, b) in zip(toy.state_dict().items(), model.state_dict().items()):
        assert torch.equal(a, b), k
    with pytest.raises(StateError):
        load_checkpoint(tmp_path / "missing.pt")


def test_load_pretrained_copies_matching_tensors(tmp_path, toy):
    state = dict(toy.visual.state_dict())
    state["unrelated.weight"] = torch.zeros(3)
    torch.save(state, tmp_path / "v.pt")
    fresh = VisualNet(BackboneConfig.toy(3))
    loaded = load_pretrained(fresh, tmp_path / "v.pt")
    assert loaded == sorted(toy.visual.state_dict())
    for a, b in zip(fresh.state_dict().values(), toy.visual.state_dict().values()):
        assert torch.equal(a, b)
