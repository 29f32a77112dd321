import pytest
import torch

from elnlab.models import (ELN_STRIDE, ENCODER_STRIDE, ErrorCorrectionNet,
                           ErrorLocalizationNet, SegModelConfig, build_eln_input,
                           build_models, entropy_map, softmax_and_entropy)


@pytest.fixture(scope="module")
def model():
    model, _ = build_models(SegModelConfig(), seed=0)
    model.eval()
    return model


class TestEncoder:
    def test_stride_eight_output(self, model):
        x = torch.rand(1, 3, 64, 64)
        feats = model.encoder(x)
        assert feats.shape[-2:] == (8, 8)

    def test_identical_images_identical_features(self, model):
        x = torch.rand(1, 3, 32, 32)
        feats = model.encoder(torch.cat([x, x]))
        assert torch.equal(feats[0], feats[1])

    def test_indivisible_size_rejected(self, model):
        with pytest.raises(ValueError, match="stride"):
            model.encoder(torch.rand(1, 3, 30, 30))

    def test_zero_image_finite(self, model):
        out = model(torch.zeros(1, 3, 32, 32), with_aux=True)
        for logits in out.logits:
            assert torch.isfinite(logits).all()
        assert torch.isfinite(out.embedding).all()


class TestDecoder:
    def test_channel_contracts(self, model):
        out = model(torch.rand(2, 3, 32, 32), with_aux=True)
        assert out.logits[0].shape == (2, 4, 32, 32)
        assert out.embedding.shape[1] == 16
        assert len(out.logits) == 3  # main + 2 aux

    def test_logits_at_input_resolution_embedding_native(self, model):
        out = model(torch.rand(1, 3, 64, 64))
        assert out.logits[0].shape[-2:] == (64, 64)
        assert out.embedding.shape[-2:] == (16, 16)

    def test_proj_head_isolated_from_logits(self):
        m, _ = build_models(SegModelConfig(), seed=1)
        x = torch.rand(1, 3, 32, 32)
        before = m(x).logits[0].clone()
        with torch.no_grad():
            for p in m.decoder.proj_head.parameters():
                p.add_(1.0)
        after = m(x).logits[0]
        assert torch.equal(before, after)

    def test_probs_on_simplex(self, model):
        out = model(torch.rand(2, 3, 32, 32), with_aux=True)
        for probs in out.probs:
            sums = probs.sum(dim=1)
            assert (probs >= 0).all()
            assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)


class TestSoftmaxEntropy:
    def test_near_one_hot_entropy_zero(self):
        logits = torch.zeros(1, 4, 2, 2)
        logits[:, 0] = 50.0
        _, ent = softmax_and_entropy(logits)
        assert ent.max() < 1e-3

    def test_uniform_entropy_one(self):
        probs, ent = softmax_and_entropy(torch.zeros(1, 4, 3, 3))
        assert torch.allclose(probs, torch.full_like(probs, 0.25))
        assert torch.allclose(ent, torch.ones_like(ent), atol=1e-6)

    def test_half_half_entropy(self):
        # classes (0.5, 0.5, 0, 0) -> raw entropy ln 2, normalized by ln 4 -> 0.5
        probs = torch.tensor([0.5, 0.5, 0.0, 0.0]).view(1, 4, 1, 1)
        ent = entropy_map(probs)
        assert abs(float(ent) - 0.5) < 1e-6

    def test_entropy_in_unit_interval(self):
        probs, ent = softmax_and_entropy(torch.randn(2, 4, 8, 8) * 5)
        assert float(ent.min()) >= 0.0 and float(ent.max()) <= 1.0 + 1e-6


class TestElnInput:
    def test_channel_count_and_order(self):
        image = torch.rand(2, 3, 16, 16)
        probs = torch.softmax(torch.randn(2, 4, 16, 16), dim=1)
        ent = entropy_map(probs)
        stacked = build_eln_input(image, probs, ent)
        assert stacked.shape[1] == 8  # 3 + 4 + 1
        assert torch.equal(stacked[:, :3], image)
        assert torch.equal(stacked[:, 3:7], probs)
        assert torch.equal(stacked[:, 7:8], ent)

    def test_spatial_mismatch_rejected(self):
        with pytest.raises(ValueError, match="spatial"):
            build_eln_input(torch.rand(1, 3, 16, 16),
                            torch.rand(1, 4, 8, 8),
                            torch.rand(1, 1, 16, 16))


class TestErrorNets:
    def _input(self, c=4, b=2, hw=16):
        image = torch.rand(b, 3, hw, hw)
        probs = torch.softmax(torch.randn(b, c, hw, hw), dim=1)
        return build_eln_input(image, probs, entropy_map(probs))

    def test_output_strictly_inside_unit_interval(self):
        torch.manual_seed(0)
        eln = ErrorLocalizationNet(4)
        out = eln(self._input()).detach()
        assert out.shape == (2, 1, 16, 16)
        assert float(out.min()) > 0.0 and float(out.max()) < 1.0

    def test_determinism_across_batch(self):
        torch.manual_seed(0)
        eln = ErrorLocalizationNet(4)
        x = self._input(b=1)
        out = eln(torch.cat([x, x]))
        assert torch.equal(out[0], out[1])

    def test_gradient_reaches_parameters(self):
        torch.manual_seed(0)
        eln = ErrorLocalizationNet(4)
        out = eln(self._input())
        out.mean().backward()
        grads = [p.grad for p in eln.parameters()]
        assert all(g is not None for g in grads)
        assert any(g.abs().max() > 0 for g in grads)

    def test_channel_mismatch_rejected(self):
        eln = ErrorLocalizationNet(4)
        with pytest.raises(ValueError, match="channels"):
            eln(torch.rand(1, 9, 16, 16))

    def test_secn_outputs_class_probs(self):
        torch.manual_seed(0)
        secn = ErrorCorrectionNet(4)
        out = secn(self._input())
        assert out.shape == (2, 4, 16, 16)
        sums = out.sum(dim=1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)

    def test_stride_divisibility(self):
        eln = ErrorLocalizationNet(4)
        x = torch.rand(1, 8, 18, 18)
        with pytest.raises(ValueError, match="stride"):
            eln(x)
        assert ELN_STRIDE == 4 and ENCODER_STRIDE == 8


class TestAuxIsolation:
    def test_aux_losses_never_touch_encoder(self):
        m, _ = build_models(SegModelConfig(), seed=2)
        x = torch.rand(2, 3, 32, 32)
        out = m(x, with_aux=True)
        # any loss of aux logits alone must leave the encoder grad-free
        out.logits[1].sum().backward()
        assert all(p.grad is None for p in m.encoder.parameters())
        assert any(p.grad is not None for p in m.aux_decoders[0].parameters())

    def test_aux_decoders_architecturally_identical(self):
        m, _ = build_models(SegModelConfig(), seed=0)
        main_shapes = [tuple(p.shape) for p in m.decoder.parameters()]
        for dec in m.aux_decoders:
            assert [tuple(p.shape) for p in dec.parameters()] == main_shapes
