import pytest
import torch

from agman.backbone import ClassificationHead, HierarchicalFusion, TinyNet
from agman.config import ModelConfig, RunConfig
from agman.data import AttributeSpace, generate_synthetic
from agman.losses import DynamicWeighting, classification_loss, triplet_loss
from agman.model import build_model

from conftest import tiny_config
from fd import gradient_errors

SPACE3 = AttributeSpace(("a", "b", "c"), (4, 3, 2))


def test_tinynet_stage_shapes():
    model = build_model(RunConfig(space=SPACE3), SPACE3).eval()
    f2, f3 = model.extract_stages(torch.rand(2, 3, 64, 64))
    assert f2.shape == (2, 32, 16, 16)
    assert f3.shape == (2, 64, 8, 8)
    f23, f_img = model.fusion(f2, f3)
    assert f23.shape == (2, 64, 8, 8)
    assert f_img.shape == (2, 128, 8, 8)


def test_resnet50_profile_shapes():
    from torchvision.models import resnet50
    from torchvision.models.feature_extraction import create_feature_extractor

    sp = AttributeSpace(tuple(f"a{i}" for i in range(8)), (5,) * 8)
    cfg = RunConfig(space=sp, model=ModelConfig(profile="resnet50"))
    model = build_model(cfg, sp).eval()
    x = torch.rand(1, 3, 224, 224)
    with torch.no_grad():
        f2, f3 = model.extract_stages(x)
        reference = create_feature_extractor(resnet50(weights=None).eval(), ["layer2", "layer3"])(x)
        f23, f_img = model.fusion(f2, f3)
        emb, logits, _ = model(x, torch.tensor([3]))
    assert f2.shape == reference["layer2"].shape == (1, 512, 28, 28)
    assert f3.shape == reference["layer3"].shape == (1, 1024, 14, 14)
    assert f23.shape == (1, 1024, 14, 14)
    assert f_img.shape == (1, 2048, 14, 14)
    assert emb.shape == (1, 1024) and torch.isfinite(emb).all()
    assert logits.shape == (1, 8)


def test_extract_stages_validates_input():
    model = build_model(RunConfig(space=SPACE3), SPACE3)
    x = torch.rand(1, 3, 64, 64)
    x[0, 1, 5, 5] = float("nan")
    with pytest.raises(ValueError, match="non-finite"):
        model.extract_stages(x)
    with pytest.raises(ValueError, match="shape"):
        model.extract_stages(torch.rand(1, 3, 32, 32))


def test_fusion_zero_projection_is_additive_identity():
    fusion = HierarchicalFusion(32, 64)
    with torch.no_grad():
        fusion.proj.weight.zero_()
    f2, f3 = torch.randn(1, 32, 16, 16), torch.randn(1, 64, 8, 8)
    f23, f_img = fusion(f2, f3)
    assert torch.equal(f23, f3)
    assert torch.equal(f_img, torch.cat([f3, f3], 1))


def test_fusion_identity_projection_hand_sum():
    fusion = HierarchicalFusion(1, 1).double()
    with torch.no_grad():
        fusion.proj.weight.fill_(1.0)
    f2 = torch.tensor([[1.0, 2.0, 3.0, 4.0],
                       [5.0, 6.0, 7.0, 8.0],
                       [0.0, 0.0, 1.0, 1.0],
                       [0.0, 4.0, 1.0, 1.0]], dtype=torch.float64).view(1, 1, 4, 4)
    f3 = torch.tensor([[10.0, 20.0], [30.0, 40.0]], dtype=torch.float64).view(1, 1, 2, 2)
    f23, _ = fusion(f2, f3)
    # 2x2 block means of f2: 3.5, 5.5, 1.0, 1.0
    expected = torch.tensor([[13.5, 25.5], [31.0, 41.0]], dtype=torch.float64)
    assert torch.equal(f23[0, 0], expected)


def test_fusion_rejects_incompatible_maps():
    fusion = HierarchicalFusion(32, 64)
    with pytest.raises(ValueError):
        fusion(torch.randn(1, 16, 16, 16), torch.randn(1, 64, 8, 8))
    with pytest.raises(ValueError):
        fusion(torch.randn(1, 32, 8, 8), torch.randn(1, 64, 8, 8))


def test_classification_head_contract():
    net = TinyNet()
    head = ClassificationHead(net.block4, 64, 128, 8).eval()
    f23 = torch.randn(2, 64, 8, 8)
    logits = head(f23)
    assert logits.shape == (2, 8) and torch.isfinite(logits).all()
    assert not torch.allclose(logits[0], logits[1])
    with torch.no_grad():
        head.fc.weight.zero_()
        head.fc.bias.zero_()
    assert torch.all(head(f23) == 0)
    with pytest.raises(ValueError, match="channels"):
        head(torch.randn(1, 32, 8, 8))


def test_embed_is_pure_and_attribute_dependent():
    model = build_model(RunConfig(space=SPACE3), SPACE3)
    img = torch.rand(3, 64, 64)
    e1, t1 = model.embed(img, 1)
    e2, _ = model.embed(img, 1)
    e3, _ = model.embed(img, 2)
    assert e1.shape == (64,)
    assert torch.equal(e1, e2)
    assert not torch.allclose(e1, e3)
    assert t1.spatial_softmax_map.shape == (8, 8)
    assert abs(t1.spatial_softmax_map.sum().item() - 1) < 1e-6


def test_embed_rejects_bad_attribute():
    model = build_model(RunConfig(space=SPACE3), SPACE3)
    with pytest.raises(IndexError):
        model.embed(torch.rand(3, 64, 64), 3)


def test_build_model_is_seeded():
    a = build_model(RunConfig(space=SPACE3, seed=4), SPACE3)
    b = build_model(RunConfig(space=SPACE3, seed=4), SPACE3)
    c = build_model(RunConfig(space=SPACE3, seed=5), SPACE3)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa)


def test_fusion_toggle_uses_f3_only():
    cfg = RunConfig(space=SPACE3, model=ModelConfig(enable_fusion=False))
    model = build_model(cfg, SPACE3)
    assert model.aga.project.in_channels == 64
    emb, logits, _ = model(torch.rand(2, 3, 64, 64), torch.tensor([0, 1]))
    assert emb.shape == (2, 64) and logits.shape == (2, 3)


def test_all_attention_disabled_is_pooled_projection(tiny):
    cfg = tiny_config(enable_asa=False, enable_sa=False, enable_aca=False, enable_ca=False)
    model = build_model(cfg, cfg.space).double().eval()
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    emb, _, _ = model(x, torch.tensor([0, 1]))
    f2, f3 = model.extract_stages(x)
    _, f_img = model.fusion(f2, f3)
    assert torch.allclose(emb, model.aga.project(f_img).mean(dim=(2, 3)), atol=1e-15)


def _generic_point(model, seed=2):
    """Redraw every parameter and BatchNorm statistic at random.

    At initialisation BatchNorm biases are exactly zero, which parks ReLU
    inputs of dead or zero-padded regions on the kink, and the embeddings of
    different images are nearly collinear, so the attention gradients sit at
    finite-difference round-off. Gradient correctness is a pointwise property,
    so the check runs at a generic point instead.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype))
        for m in model.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.running_mean.copy_(0.1 * torch.randn(m.running_mean.shape, generator=gen))
                m.running_var.copy_(0.5 + torch.rand(m.running_var.shape, generator=gen))


def _objective(model, weighting, images, mode):
    emb, logits, _ = model(images, torch.tensor([1, 1, 1]))
    l_trip = triplet_loss(emb[0], emb[1], emb[2], 0.2, mode)
    target = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    l_cls = classification_loss(logits[:1], target)
    return weighting(l_cls, l_trip)


@pytest.mark.parametrize("mode", ["similarity_corrected", "as_written"])
def test_training_objective_gradients(tiny, mode):
    """Full weighted training objective through the tiny model vs finite differences."""
    model = build_model(tiny, tiny.space).double().eval()
    _generic_point(model)
    weighting = DynamicWeighting().double()
    with torch.no_grad():
        weighting.w0.fill_(0.3)
        weighting.w1.fill_(-0.2)
    split = generate_synthetic(tiny.space, 1, 16, seed=0)
    images = torch.stack([r.pixels for r in split.records[:3]]).double()
    f = lambda: _objective(model, weighting, images, mode)  # noqa: E731
    assert f().item() > 0
    named = list(model.named_parameters()) + list(weighting.named_parameters())
    f().backward()
    dead = [name for name, p in named if p.grad.norm() < 1e-6]
    assert not dead, f"gradient check would be vacuous for {dead}"
    errors = gradient_errors(f, named)
    for name, err in errors.items():
        assert err < 1e-4, (name, err)


def test_profile_normalisation_defaults():
    tiny = build_model(RunConfig(space=SPACE3), SPACE3)
    assert torch.equal(tiny.pixel_mean.flatten(), torch.zeros(3))
    assert torch.equal(tiny.pixel_std.flatten(), torch.ones(3))
    cfg = RunConfig(space=SPACE3, model=ModelConfig(profile="resnet50"))
    assert cfg.pixel_mean == [0.485, 0.456, 0.406] and cfg.pixel_std == [0.229, 0.224, 0.225]
