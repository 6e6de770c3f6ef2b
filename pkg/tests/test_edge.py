import math

import numpy as np
import pytest
import torch

from lltext.domain import PairedSample
from lltext.edge import (EdgeEstimator, build_edge_estimator, estimate_edges,
                         load_edge_estimator, save_edge_estimator,
                         teacher_edges, train_edge_estimator)

from conftest import rand_image_t


class TestTeacherEdges:
    def test_constant_image_zero_response(self):
        for value in (0.0, 0.5, 1.0):
            e = teacher_edges(torch.full((1, 3, 8, 8), value))
            assert torch.equal(e, torch.zeros(1, 1, 8, 8))

    def test_vertical_step_response(self):
        # columns >= 4 are white; Sobel x gives |Gx| = 4 at columns 3 and 4
        x = torch.zeros(1, 3, 8, 8)
        x[..., 4:] = 1.0
        e = teacher_edges(x)[0, 0]
        expected = 4.0 / (4.0 * math.sqrt(2.0))
        on = e[:, 3:5]
        off = torch.cat([e[:, :3], e[:, 5:]], dim=1)
        assert torch.allclose(on, torch.full_like(on, expected), atol=1e-6)
        assert torch.equal(off, torch.zeros_like(off))

    def test_range_contract(self):
        for seed in range(5):
            e = teacher_edges(rand_image_t(seed, 16, 16))
            assert float(e.min()) >= 0.0
            assert float(e.max()) <= 1.0

    def test_translation_equivariance_interior(self):
        x = rand_image_t(11, 16, 16)
        shifted = torch.roll(x, shifts=(1, 1), dims=(2, 3))
        e = teacher_edges(x)
        e_shifted = teacher_edges(shifted)
        # compare interiors to dodge the padded boundary
        np.testing.assert_allclose(
            e_shifted[0, 0, 2:-2, 2:-2].numpy(),
            torch.roll(e, shifts=(1, 1), dims=(2, 3))[0, 0, 2:-2, 2:-2].numpy(),
            atol=1e-6)


class TestEdgeEstimator:
    def test_output_shape(self):
        net = build_edge_estimator(seed=0)
        out = estimate_edges(rand_image_t(0, 64, 64), net)
        assert tuple(out.shape) == (1, 1, 64, 64)

    def test_deterministic(self):
        x = rand_image_t(1, 32, 32)
        net = build_edge_estimator(seed=5)
        assert torch.equal(estimate_edges(x, net), estimate_edges(x, net))

    def test_same_seed_same_net(self):
        x = rand_image_t(2, 32, 32)
        a = estimate_edges(x, build_edge_estimator(seed=9))
        b = estimate_edges(x, build_edge_estimator(seed=9))
        assert torch.equal(a, b)

    def test_zero_params_give_half(self):
        net = build_edge_estimator(seed=0)
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
        out = estimate_edges(rand_image_t(3, 16, 16), net)
        assert torch.equal(out, torch.full((1, 1, 16, 16), 0.5))

    def test_output_bounded_for_wild_params(self):
        net = build_edge_estimator(seed=0)
        with torch.no_grad():
            for p in net.parameters():
                p.mul_(50.0)
        out = estimate_edges(rand_image_t(4, 16, 16), net)
        assert float(out.min()) >= 0.0
        assert float(out.max()) <= 1.0

    def test_indivisible_input_rejected(self):
        net = build_edge_estimator(seed=0)
        with pytest.raises(ValueError, match="divisible"):
            net(torch.zeros(1, 3, 12, 12))


def _make_samples(rng, n=1, size=32):
    out = []
    for i in range(n):
        gt = rng.random((size, size, 3)).astype(np.float32)
        low = (gt * 0.05).astype(np.float32)
        out.append(PairedSample(low=low, gt=gt, id=f"s{i}"))
    return out


class TestTrainEdgeEstimator:
    def test_loss_decreases(self, rng):
        samples = _make_samples(rng)
        _, history = train_edge_estimator(samples, steps=200, seed=0)
        assert len(history) == 200
        assert history[-1] < history[0]

    def test_constant_target_overfits_to_zero(self, rng):
        gt = np.full((32, 32, 3), 0.5, np.float32)
        low = rng.random((32, 32, 3)).astype(np.float32) * 0.1
        sample = PairedSample(low=low, gt=gt, id="flat")
        net, _ = train_edge_estimator([sample], steps=300, seed=0)
        out = estimate_edges(torch.from_numpy(low.transpose(2, 0, 1))[None], net)
        assert float(out.mean()) < 0.1

    def test_empty_sample_list_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            train_edge_estimator([], steps=10)

    def test_custom_teacher_plugin_sees_ground_truth(self, rng):
        samples = _make_samples(rng)
        seen = []

        def flat_teacher(images):
            seen.append(images.clone())
            return torch.zeros_like(images[:, :1])

        train_edge_estimator(samples, steps=3, seed=0, teacher=flat_teacher)
        # targets must come from the bright image, never the dark input
        assert len(seen) == len(samples)
        gt = torch.from_numpy(samples[0].gt.transpose(2, 0, 1))[None]
        assert torch.equal(seen[0], gt)


class TestEdgeCheckpoint:
    def test_save_load_round_trip(self, tmp_path, rng):
        net, _ = train_edge_estimator(_make_samples(rng), steps=20, seed=0)
        p = tmp_path / "edge.ckpt"
        save_edge_estimator(net, p)
        loaded = load_edge_estimator(p)
        x = rand_image_t(8, 32, 32)
        assert torch.equal(estimate_edges(x, net), estimate_edges(x, loaded))

    def test_wrong_kind_rejected(self, tmp_path):
        from lltext.container import save_arrays
        p = tmp_path / "other.ckpt"
        save_arrays(p, {"w": np.zeros(3, np.float32)}, {"kind": "something"})
        with pytest.raises(ValueError, match="edge estimator"):
            load_edge_estimator(p)
