import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mipreid.errors import MissingClassifierError, SamplerContractError
from mipreid.ipg import InstancePromptGenerator
from mipreid.objectives import Stage, id_loss, iael_loss, stage_for_epoch, total_loss, triplet_loss


def _fixed_head(logits):
    """A linear head whose output equals ``logits`` for identity-matrix inputs."""
    head = torch.nn.Linear(logits.shape[1], logits.shape[1], bias=False)
    with torch.no_grad():
        head.weight.copy_(torch.eye(logits.shape[1]))
    return head, logits


def triplet_oracle(points, labels, margin):
    """Per-anchor enumeration over every positive and negative."""
    losses = []
    for a in range(len(points)):
        pos = [np.linalg.norm(points[a] - points[p]) for p in range(len(points)) if p != a and labels[p] == labels[a]]
        neg = [np.linalg.norm(points[a] - points[n]) for n in range(len(points)) if labels[n] != labels[a]]
        losses.append(max(0.0, max(pos) - min(neg) + margin))
    return float(np.mean(losses))


class TestIdLoss:
    def test_confident_correct_is_zero(self):
        labels = torch.tensor([0, 2, 1])
        head, feats = _fixed_head(torch.nn.functional.one_hot(labels, 3).float() * 1e6)
        assert id_loss(feats, labels, head) < 1e-3

    def test_uniform_logits(self):
        head, feats = _fixed_head(torch.zeros(5, 10))
        assert id_loss(feats, torch.arange(5), head).item() == pytest.approx(math.log(10), abs=1e-6)

    def test_matches_log_softmax_oracle(self, rng):
        logits = rng.standard_normal((4, 3))
        labels = np.array([0, 2, 1, 2])
        expected = np.mean([-(logits[i, labels[i]] - np.log(np.exp(logits[i]).sum())) for i in range(4)])
        head, feats = _fixed_head(torch.from_numpy(logits))
        head = head.double()
        assert id_loss(feats, torch.from_numpy(labels), head).item() == pytest.approx(expected, abs=1e-6)


class TestTriplet:
    points = np.array([[0.0], [0.1], [1.0], [1.1]])
    labels = np.array([0, 0, 1, 1])

    def _loss(self, margin, points=None):
        pts = self.points if points is None else points
        return triplet_loss(torch.from_numpy(pts), torch.from_numpy(self.labels), margin).item()

    def test_separated_clusters(self):
        assert self._loss(0.3) == pytest.approx(0.0, abs=1e-9)

    def test_hand_enumerated_margin_one(self):
        # anchors: 0.1-1.0+1, 0.1-0.9+1, 0.1-0.9+1, 0.1-1.0+1 -> mean 0.15
        expected = triplet_oracle(self.points, self.labels, 1.0)
        assert expected == pytest.approx(0.15)
        assert self._loss(1.0) == pytest.approx(expected, abs=1e-6)

    def test_singleton_identity_rejected(self):
        with pytest.raises(SamplerContractError):
            triplet_loss(torch.randn(3, 2), torch.tensor([0, 0, 1]))

    @given(seed=st.integers(0, 10_000), shift=st.floats(-5, 5))
    @settings(max_examples=30, deadline=None)
    def test_translation_and_permutation_invariance(self, seed, shift):
        g = np.random.default_rng(seed)
        feats = g.standard_normal((8, 3))
        labels = np.repeat(np.arange(4), 2)
        ref = triplet_oracle(feats, labels, 0.3)
        base = triplet_loss(torch.from_numpy(feats), torch.from_numpy(labels), 0.3).item()
        assert base == pytest.approx(ref, abs=1e-6)
        moved = triplet_loss(torch.from_numpy(feats + shift), torch.from_numpy(labels), 0.3).item()
        assert moved == pytest.approx(base, abs=1e-6)
        perm = g.permutation(8)
        permuted = triplet_loss(torch.from_numpy(feats[perm]), torch.from_numpy(labels[perm]), 0.3).item()
        assert permuted == pytest.approx(base, abs=1e-9)

    def test_nonnegative(self, rng):
        feats = torch.from_numpy(rng.standard_normal((12, 4)))
        assert triplet_loss(feats, torch.arange(6).repeat(2)) >= 0


class TestIael:
    def _state(self, layers=4, ids=10, dim=6):
        torch.manual_seed(0)
        return InstancePromptGenerator(layers, 3, dim, num_identities=ids)

    def test_uniform_classifiers(self):
        state = self._state()
        for i in range(1, 5):
            with torch.no_grad():
                getattr(state, f"cls{i}").weight.zero_()
                getattr(state, f"cls{i}").bias.zero_()
        prompts = [torch.randn(8, 3, 6) for _ in range(4)]
        loss = iael_loss(state, prompts, torch.arange(8) % 10)
        assert loss.item() == pytest.approx(4 * math.log(10), abs=1e-5)
        avg = iael_loss(state, prompts, torch.arange(8) % 10, average_layers=True)
        assert avg.item() == pytest.approx(math.log(10), abs=1e-5)

    def test_confident_classifiers(self):
        state = self._state(layers=2, ids=3, dim=3)
        labels = torch.tensor([0, 1, 2, 0])
        prompts = []
        for i in (1, 2):
            with torch.no_grad():
                getattr(state, f"cls{i}").weight.copy_(torch.eye(3) * 1e4)
                getattr(state, f"cls{i}").bias.zero_()
            # one-hot rows that stay distinct after batch normalization
            prompts.append(torch.nn.functional.one_hot(labels, 3).float().unsqueeze(1).expand(-1, 3, -1))
        assert iael_loss(state, prompts, labels).item() < 1e-3

    def test_matches_per_layer_oracle(self):
        state = self._state(layers=3, ids=5).double()
        prompts = [torch.randn(6, 3, 6, dtype=torch.float64) for _ in range(3)]
        labels = torch.tensor([0, 1, 2, 3, 4, 0])
        expected = 0.0
        for i, p in enumerate(prompts, start=1):
            pooled = p.mean(dim=1).numpy()
            bn = getattr(state, f"bn{i}")
            mu, var = pooled.mean(0), pooled.var(0)
            normed = (pooled - mu) / np.sqrt(var + bn.eps) * bn.weight.detach().numpy() + bn.bias.detach().numpy()
            cls = getattr(state, f"cls{i}")
            logits = normed @ cls.weight.detach().numpy().T + cls.bias.detach().numpy()
            logp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
            expected += -np.mean(logp[np.arange(6), labels.numpy()])
        assert iael_loss(state, prompts, labels).item() == pytest.approx(expected, abs=1e-6)

    def test_shuffle_within_identity_groups(self):
        state = self._state(layers=2, ids=3)
        prompts = [torch.randn(6, 3, 6) for _ in range(2)]
        labels = torch.tensor([0, 0, 1, 1, 2, 2])
        a = iael_loss(state, prompts, labels)
        swap = torch.tensor([1, 0, 3, 2, 5, 4])
        b = iael_loss(state, [p[swap] for p in prompts], labels[swap])
        assert a.item() == pytest.approx(b.item(), abs=1e-6)

    def test_missing_classifiers(self):
        state = InstancePromptGenerator(2, 3, 6)
        with pytest.raises(MissingClassifierError):
            iael_loss(state, [torch.randn(4, 3, 6)] * 2, torch.zeros(4, dtype=torch.long))


class TestTotal:
    def test_stage1(self):
        assert total_loss(1.0, 2.0, 4.0, Stage.STAGE1).total.item() == pytest.approx(3.0)

    def test_stage2_defaults(self):
        report = total_loss(1.0, 2.0, 4.0, Stage.STAGE2)
        assert report.total.item() == pytest.approx(1.0 * 3 + 0.5 * 4)
        assert report.stage is Stage.STAGE2

    def test_zero_alpha2_equals_stage1(self):
        s2 = total_loss(1.0, 2.0, 4.0, Stage.STAGE2, alpha2=0.0).total
        assert s2.item() == pytest.approx(total_loss(1.0, 2.0, 4.0, Stage.STAGE1).total.item())

    def test_keeps_graph(self):
        x = torch.tensor(2.0, requires_grad=True)
        total_loss(x, x * 2, x * 3, Stage.STAGE2).total.backward()
        assert x.grad.item() == pytest.approx(1 + 2 + 0.5 * 3)


@pytest.mark.parametrize(
    "epoch,epochs,fraction,stage",
    [(0, 30, 0.1, Stage.STAGE1), (2, 30, 0.1, Stage.STAGE1), (3, 30, 0.1, Stage.STAGE2), (0, 10, 0.0, Stage.STAGE2)],
)
def test_stage_boundary(epoch, epochs, fraction, stage):
    assert stage_for_epoch(epoch, epochs, fraction) is stage
