import math

import numpy as np
import pytest
import torch

from ehrtext.contrastive import (
    ProjectionHeads,
    Temperature,
    clip_loss,
    clip_loss_from_similarity,
    project,
    retrieval_recall_at_k,
)
from ehrtext.exceptions import ConfigError, ContractViolation
from ehrtext.numerics import gradcheck

from .oracles import clip_loss_loops


class TestClipLoss:
    @pytest.mark.parametrize("n", [2, 4, 8, 64])
    def test_uniform_similarity_is_two_log_n(self, n):
        s = torch.full((n, n), 0.3, dtype=torch.float64)
        assert clip_loss_from_similarity(s).item() == pytest.approx(2 * math.log(n), abs=1e-6)

    def test_single_pair_is_zero(self):
        z = torch.randn(1, 5, dtype=torch.float64)
        assert abs(clip_loss(z, torch.randn(1, 5, dtype=torch.float64)).item()) < 1e-9

    def test_hand_value_n2(self):
        # orthonormal pairs at tau = 1: 2 * log(1 + e^-1)
        z = torch.eye(2, dtype=torch.float64)
        assert clip_loss(z, z, tau=1.0).item() == pytest.approx(0.6265233750364457, abs=1e-12)

    def test_matches_loop_oracle(self):
        gen = torch.Generator().manual_seed(0)
        for n in (2, 3, 7, 16):
            ze = torch.randn(n, 6, dtype=torch.float64, generator=gen)
            zt = torch.randn(n, 6, dtype=torch.float64, generator=gen)
            for tau in (0.05, 0.1, 1.0):
                assert clip_loss(ze, zt, tau).item() == pytest.approx(
                    clip_loss_loops(ze.numpy(), zt.numpy(), tau), abs=1e-9)

    def test_transpose_symmetry(self):
        ze, zt = torch.randn(5, 4, dtype=torch.float64), torch.randn(5, 4, dtype=torch.float64)
        assert clip_loss(ze, zt).item() == pytest.approx(clip_loss(zt, ze).item(), abs=1e-12)

    def test_stable_at_small_tau(self):
        z = torch.eye(4, dtype=torch.float64)
        loss = clip_loss(z, z, tau=1e-3)
        assert torch.isfinite(loss) and loss.item() < 1e-9

    def test_aligned_below_chance(self):
        z = torch.randn(8, 16, dtype=torch.float64)
        assert clip_loss(z, z).item() < 2 * math.log(8)

    def test_bad_tau(self):
        z = torch.randn(3, 4)
        with pytest.raises(ConfigError):
            clip_loss(z, z, tau=0.0)
        with pytest.raises(ConfigError):
            clip_loss_from_similarity(torch.zeros(3, 3), tau=-1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            clip_loss(torch.randn(3, 4), torch.randn(2, 4))

    def test_gradcheck(self):
        gen = torch.Generator().manual_seed(1)
        ze = torch.randn(4, 3, dtype=torch.float64, generator=gen)
        zt = torch.randn(4, 3, dtype=torch.float64, generator=gen)
        assert gradcheck(lambda x: clip_loss(x.view(4, 3), zt), ze.flatten()) < 1e-5
        assert gradcheck(lambda x: clip_loss(ze, x.view(4, 3)), zt.flatten()) < 1e-5


class TestHeads:
    def test_unit_norm_outputs(self):
        torch.manual_seed(0)
        heads = ProjectionHeads()
        ze, zt = project(heads, torch.randn(5, 128), torch.randn(5, 768))
        assert ze.shape == zt.shape == (5, 128)
        torch.testing.assert_close(ze.norm(dim=1), torch.ones(5))
        torch.testing.assert_close(zt.norm(dim=1), torch.ones(5))

    def test_temperature(self):
        fixed = Temperature(0.1)
        assert fixed().item() == pytest.approx(0.1)
        assert not list(fixed.parameters())
        learnable = Temperature(0.1, learnable=True)
        assert len(list(learnable.parameters())) == 1
        with pytest.raises(ConfigError):
            Temperature(0.0)

    def test_projection_gradcheck(self):
        torch.manual_seed(0)
        heads = ProjectionHeads(ehr_dim=4, text_dim=6, shared_dim=3).double()
        e = torch.randn(3, 4, dtype=torch.float64)
        t = torch.randn(3, 6, dtype=torch.float64)
        assert gradcheck(lambda x: clip_loss(*heads(x.view(3, 4), t)), e.flatten()) < 1e-5


class TestRecall:
    def test_identity(self):
        z = torch.eye(5)
        assert retrieval_recall_at_k(z, z) == 1.0

    def test_ties_go_to_lower_index(self):
        ze = torch.ones(3, 2)
        zt = torch.ones(3, 2)
        # every column ties, so only row 0 ranks its partner first
        assert retrieval_recall_at_k(ze, zt, 1) == pytest.approx(1 / 3)
        assert retrieval_recall_at_k(ze, zt, 3) == 1.0

    def test_brute_force(self):
        gen = torch.Generator().manual_seed(2)
        ze = torch.randn(20, 4, generator=gen)
        zt = torch.randn(20, 4, generator=gen)
        s = (ze / ze.norm(dim=1, keepdim=True)) @ (zt / zt.norm(dim=1, keepdim=True)).T
        for k in (1, 3, 5):
            hits = [i in np.argsort(-s[i].numpy(), kind="stable")[:k] for i in range(20)]
            assert retrieval_recall_at_k(ze, zt, k) == pytest.approx(np.mean(hits))

    def test_k_range(self):
        with pytest.raises(ContractViolation):
            retrieval_recall_at_k(torch.eye(3), torch.eye(3), 4)
