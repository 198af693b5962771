import numpy as np
import pytest
import torch
from scipy.optimize import nnls

from mipreid.config import ModelConfig
from mipreid.ipg import (
    FusedPromptGenerator,
    InstancePromptGenerator,
    PromptPrototypeBank,
    fuse_instance_prompt,
    generate_instance_prompt,
    ipg_param_count,
    is_collapsed,
    mean_pairwise_distance,
)
from mipreid.model import MIPNet

from oracles import encoder_layer, params_of


@pytest.fixture
def gen():
    torch.manual_seed(0)
    return InstancePromptGenerator(num_layers=2, length=3, dim=8, num_heads=1, mlp_ratio=2.0, num_identities=4)


def test_single_shared_generator(gen):
    layers = [m for m in gen.modules() if type(m).__name__ == "EncoderLayer"]
    assert len(layers) == 1
    cfg = ModelConfig(num_layers=6)
    big = InstancePromptGenerator.from_config(cfg, use_iael=False)
    assert len([m for m in big.modules() if type(m).__name__ == "EncoderLayer"]) == 1
    assert not big.has_classifiers


def test_output_shape_and_determinism(gen):
    tokens = torch.randn(1, 5, 8)
    a = generate_instance_prompt(gen, tokens.expand(2, -1, -1), 1)
    assert a.shape == (2, 3, 8)
    assert torch.equal(a[0], a[1])


def test_different_layers_use_different_queries(gen):
    tokens = torch.randn(2, 5, 8)
    assert not torch.allclose(gen(tokens, 1), gen(tokens, 2))


def test_masked_attention_depends_only_on_queries(gen):
    k, l = 3, 5
    mask = torch.zeros(k + l, k + l, dtype=torch.bool)
    mask[:k, k:] = True  # queries may not look at the image tokens
    a = gen(torch.randn(1, l, 8), 1, mask=mask)
    b = gen(torch.randn(1, l, 8) * 10, 1, mask=mask)
    assert torch.allclose(a, b, atol=1e-6)


def test_matches_attention_oracle():
    torch.manual_seed(5)
    state = InstancePromptGenerator(num_layers=1, length=1, dim=4, num_heads=1, mlp_ratio=2.0).double()
    for p in state.trans.parameters():
        torch.nn.init.normal_(p, std=0.5)
    tokens = torch.randn(1, 2, 4, dtype=torch.float64)
    out = generate_instance_prompt(state, tokens, 1)[0].detach().numpy()
    seq = np.concatenate([state.v1.detach().numpy(), tokens[0].numpy()])
    expected = encoder_layer(seq, params_of(state.trans), 1)[:1]
    np.testing.assert_allclose(out, expected, atol=1e-5)


def test_gradients_reach_queries_generator_and_tokens(gen):
    tokens = torch.randn(2, 5, 8, requires_grad=True)
    gen(tokens, 2).sum().backward()
    assert gen.v2.grad is not None and gen.v2.grad.abs().sum() > 0
    assert gen.v1.grad is None
    assert gen.trans.attn.qkv.weight.grad.abs().sum() > 0
    assert tokens.grad.abs().sum() > 0


class TestFusion:
    def _bank(self, size=3):
        torch.manual_seed(1)
        return PromptPrototypeBank(num_layers=2, length=2, dim=4, bank_size=size)

    def test_bank_size_floor(self):
        with pytest.raises(ValueError):
            PromptPrototypeBank(1, 2, 4, bank_size=1)

    def test_weights_are_a_distribution(self):
        w = self._bank().mixing_weights(torch.randn(5, 6, 4))
        assert torch.allclose(w.sum(-1), torch.ones(5))
        assert (w >= 0).all()

    def test_single_prototype_when_forced(self):
        bank = self._bank()
        onehot = torch.tensor([[0.0, 1.0, 0.0]])
        out = fuse_instance_prompt(bank, torch.randn(1, 6, 4), 1, weights=onehot)
        assert torch.equal(out[0], bank.prototypes1[1])

    def test_degenerate_identical_prototypes(self):
        bank = self._bank()
        with torch.no_grad():
            bank.prototypes2.copy_(bank.prototypes2[:1].expand(3, -1, -1))
        out = fuse_instance_prompt(bank, torch.randn(4, 6, 4), 2)
        assert torch.allclose(out, bank.prototypes2[0].expand(4, -1, -1), atol=1e-6)

    def test_matches_convex_combination_oracle(self):
        bank = self._bank()
        tokens = torch.randn(2, 6, 4)
        w = bank.mixing_weights(tokens).detach().numpy().astype(np.float64)
        protos = bank.prototypes1.detach().numpy().astype(np.float64)
        expected = np.zeros((2, 2, 4))
        for b in range(2):
            for p in range(3):
                expected[b] += w[b, p] * protos[p]
        np.testing.assert_allclose(fuse_instance_prompt(bank, tokens, 1).detach().numpy(), expected, atol=1e-6)

    def test_output_in_convex_hull(self):
        bank = self._bank(size=4)
        out = fuse_instance_prompt(bank, torch.randn(3, 6, 4), 2).detach().double().numpy()
        protos = bank.prototypes2.detach().double().numpy().reshape(4, -1)
        for target in out.reshape(3, -1):
            # nonnegative least squares with a heavily weighted sum-to-one row
            a = np.vstack([protos.T, 1e3 * np.ones(4)])
            b = np.concatenate([target, [1e3]])
            coef, resid = nnls(a, b)
            assert resid < 1e-4
            assert abs(coef.sum() - 1) < 1e-5

    def test_fused_generator_shapes(self):
        torch.manual_seed(0)
        fused = FusedPromptGenerator(2, 3, 8, bank_size=4, num_identities=5)
        out = fused(torch.randn(6, 5, 8), 2)
        assert out.shape == (6, 3, 8)
        assert fused.prompt_logits(out, 2).shape == (6, 5)


def test_collapse_detector():
    same = torch.randn(1, 3, 4).expand(5, -1, -1)
    assert is_collapsed(same)
    assert not is_collapsed(torch.randn(5, 3, 4))


def test_generated_prompts_vary_across_instances(tiny_cfg):
    model = MIPNet(tiny_cfg).eval()
    with torch.no_grad():
        out = model(torch.rand(8, 3, 16, 8), torch.zeros(8, dtype=torch.long))
    for prompts in out.instance_prompts:
        assert mean_pairwise_distance(prompts) > 0
        assert not is_collapsed(prompts)


class TestParamCount:
    def _enumerate(self, cfg, use_iael, variant):
        model = MIPNet(cfg, use_mpl=False, use_ipg=True, ipg_variant=variant, use_iael=use_iael)
        return sum(p.numel() for n, p in model.named_parameters() if n.startswith("ipg."))

    def test_toy_no_iael(self):
        cfg = ModelConfig(num_layers=4, instance_prompt_len=16, embed_dim=64)
        generator = (2 * 2 * 64) + (64 * 192 + 192) + (64 * 64 + 64) + (64 * 256 + 256) + (256 * 64 + 64)
        assert ipg_param_count(cfg) == 4 * 16 * 64 + generator == 4096 + 49_984

    def test_zero_length_means_no_module(self):
        assert ipg_param_count(ModelConfig(instance_prompt_len=0)) == 0

    def test_with_iael_ten_ids(self):
        cfg = ModelConfig(num_layers=4, instance_prompt_len=16, embed_dim=64, num_identities=10)
        base = ipg_param_count(cfg)
        assert ipg_param_count(cfg, use_iael=True) == base + 4 * (64 * 10 + 10 + 2 * 64)

    @pytest.mark.parametrize("variant", ["generated", "fused"])
    @pytest.mark.parametrize("use_iael", [False, True])
    def test_matches_module_enumeration(self, tiny_cfg, variant, use_iael):
        assert ipg_param_count(tiny_cfg, use_iael, variant) == self._enumerate(tiny_cfg, use_iael, variant)
