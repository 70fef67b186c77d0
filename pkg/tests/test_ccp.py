import numpy as np
import pytest
import torch

from nodule_align.ccp import ContextNet, GroupProjector, PromptBuilder
from nodule_align.encoders import StubTextEncoder

from oracles import central_difference_grad, rel_err

CLASS_NAMES = ["benign nodule", "unsure nodule", "malignant nodule"]


def make_builder(num_groups=8, seed=0):
    torch.manual_seed(seed)
    encoder = StubTextEncoder(seed=seed)
    return PromptBuilder(CLASS_NAMES, encoder, num_groups), encoder


class TestGroupProjector:
    def test_t_must_divide_512(self):
        with pytest.raises(ValueError, match="divide"):
            GroupProjector(num_groups=7)

    def test_t1_single_row(self):
        torch.manual_seed(0)
        proj = GroupProjector(num_groups=1)
        maps = torch.randn(2, 512, 4, 4)
        out = proj(maps)
        assert out.shape == (2, 1, 512)
        expected = proj.proj(maps.reshape(2, 1, -1))
        torch.testing.assert_close(out, expected)

    def test_zero_maps_give_zero_rows(self):
        proj = GroupProjector(num_groups=8)  # bias-free projection
        out = proj(torch.zeros(1, 512, 4, 4))
        torch.testing.assert_close(out, torch.zeros_like(out))

    def test_linearity(self):
        torch.manual_seed(1)
        proj = GroupProjector(num_groups=4)
        maps = torch.randn(1, 512, 4, 4)
        torch.testing.assert_close(proj(3.0 * maps), 3.0 * proj(maps), atol=1e-4, rtol=1e-4)

    def test_matches_index_loop_oracle(self):
        torch.manual_seed(2)
        proj = GroupProjector(num_groups=8).double()
        maps = torch.randn(1, 512, 4, 4, dtype=torch.float64)
        out = proj(maps)[0]
        weight = proj.proj.weight.detach().numpy()
        maps_np = maps[0].numpy()
        group_size = 512 // 8
        for t in range(8):
            flat = maps_np[t * group_size:(t + 1) * group_size].reshape(-1)
            expected = weight @ flat
            assert np.abs(out[t].detach().numpy() - expected).max() < 1e-6

    def test_rejects_wrong_spatial(self):
        proj = GroupProjector(num_groups=8)
        with pytest.raises(ValueError):
            proj(torch.zeros(1, 512, 8, 8))


class TestContextNet:
    def test_hidden_width(self):
        net = ContextNet()
        assert net.fc1.out_features == 32
        assert net.fc2.out_features == 512

    def test_zero_input_zero_final_layer(self):
        net = ContextNet()
        with torch.no_grad():
            net.fc2.weight.zero_()
            net.fc2.bias.zero_()
        out = net(torch.zeros(1, 512))
        torch.testing.assert_close(out, torch.zeros_like(out))

    def test_jvp_matches_finite_differences(self):
        torch.manual_seed(3)
        net = ContextNet(dim=16, hidden=4).double()
        rng = np.random.default_rng(0)
        x = torch.from_numpy(rng.standard_normal(16)).requires_grad_(True)
        probe = torch.from_numpy(rng.standard_normal(16))
        (net(x) @ probe).backward()

        def scalar(arr):
            with torch.no_grad():
                return float(net(torch.from_numpy(arr)) @ probe)

        fd = central_difference_grad(scalar, x.detach().numpy().copy(), 1e-4)
        assert rel_err(x.grad.numpy(), fd) < 1e-4


class TestPromptBuilder:
    def test_sequence_shape(self):
        builder, encoder = make_builder()
        grouped = torch.randn(2, 8, 512)
        prompts = builder.assemble(grouped, encoder)
        assert prompts.shape == (2, 3, 9, 512)  # K sequences of length T+1

    def test_conditional_differs_shared_identical(self):
        builder, encoder = make_builder()
        a = builder.conditional_tokens(torch.randn(1, 8, 512))
        b = builder.conditional_tokens(torch.randn(1, 8, 512))
        assert not torch.allclose(a, b)
        # the shared tokens l never depend on the image
        assert builder.context_tokens.shape == (8, 512)

    def test_zero_conditional_reduces_to_static_context(self):
        builder, encoder = make_builder()
        with torch.no_grad():
            builder.context_net.fc2.weight.zero_()
            builder.context_net.fc2.bias.zero_()
        grouped_a = torch.randn(1, 8, 512)
        grouped_b = torch.randn(1, 8, 512)
        torch.testing.assert_close(
            builder.assemble(grouped_a), builder.assemble(grouped_b)
        )

    def test_perturbing_one_context_token_is_local(self):
        builder, encoder = make_builder()
        grouped = torch.randn(1, 8, 512)
        before = builder.assemble(grouped)
        with torch.no_grad():
            builder.context_tokens[5] += 1.0
        after = builder.assemble(grouped)
        diff = (after - before).abs().sum(dim=-1)[0]  # (K, T+1)
        for k in range(3):
            changed = diff[k].nonzero().flatten().tolist()
            assert changed == [5]

    def test_class_features_deterministic(self):
        builder, encoder = make_builder()
        grouped = torch.randn(1, 8, 512)
        a = builder.class_features(grouped, encoder)
        b = builder.class_features(grouped, encoder)
        torch.testing.assert_close(a, b, atol=0, rtol=0)
        assert a.shape == (1, 3, 512)

    def test_identical_images_identical_class_features(self):
        builder, encoder = make_builder()
        grouped = torch.randn(1, 8, 512).expand(2, -1, -1)
        feats = builder.class_features(grouped, encoder)
        torch.testing.assert_close(feats[0], feats[1], atol=0, rtol=0)

    def test_gradient_through_stub_encoder(self):
        torch.manual_seed(4)
        encoder = StubTextEncoder(dim=16, seed=0)
        builder = PromptBuilder(CLASS_NAMES, encoder, num_groups=2, dim=16).double()
        grouped = torch.randn(1, 2, 16, dtype=torch.float64)
        probe = torch.randn(3, 16, dtype=torch.float64)

        def scalar_from_tokens(tokens_np):
            with torch.no_grad():
                saved = builder.context_tokens.detach().clone()
                builder.context_tokens.copy_(torch.from_numpy(tokens_np))
                value = float((builder.class_features(grouped, encoder)[0] * probe).sum())
                builder.context_tokens.copy_(saved)
            return value

        feats = builder.class_features(grouped, encoder)
        (feats[0] * probe).sum().backward()
        fd = central_difference_grad(
            scalar_from_tokens, builder.context_tokens.detach().numpy().copy(), 1e-4
        )
        assert rel_err(builder.context_tokens.grad.numpy(), fd) < 1e-3

    def test_overlong_prompt_errors(self):
        encoder = StubTextEncoder(seed=0)
        builder = PromptBuilder(CLASS_NAMES, encoder, num_groups=128)
        with pytest.raises(ValueError, match="context length"):
            builder.assemble(torch.randn(1, 128, 512), encoder)
