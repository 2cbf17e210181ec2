"""Cost model tests.

The analytic FLOP formula is checked for exact agreement with the
engine's own GEMM multiply counter on real forward passes, so the
formula cannot drift from what the network actually executes.
"""

import numpy as np
import pytest

import msn.tensor as T
from msn.config import TrainConfig, desk_preset
from msn.encoder import PatchSequence, encode_batch, init_params
from msn.masking import MaskSpec
from msn.objective import init_prototypes, predict_batch
from msn.profiler import (CostReport, cost_report, flops_forward, forward_macs,
                          kept_patches, masking_sweep, measure_step,
                          measure_view_ms)
from msn.tensor import ParameterError


def _forward(config, n_patches, batch, mode, tokens_grad=False):
    enc = config.encoder_config()
    rng = T.Rng(7)
    params = init_params(enc, rng)
    protos = init_prototypes(config.prototypes, config.head_output_dim, rng)
    gen = rng.child("tokens").generator()
    seqs = [PatchSequence(T.Tensor(gen.normal(size=(n_patches, enc.token_dim)),
                                   requires_grad=tokens_grad),
                          np.arange(n_patches))
            for _ in range(batch)]
    _, projected = encode_batch(seqs, params, enc, mode=mode)
    return predict_batch(projected, protos, config.tau_anchor)


class TestFlopFormula:
    def test_matches_executed_multiplies_desk(self):
        config = desk_preset()
        for n in [1, 9, 20, 64]:
            T.reset_mac_count()
            _forward(config, n, batch=3, mode="eval")
            assert T.mac_count() == 3 * forward_macs(config, n)

    def test_matches_executed_multiplies_other_shape(self):
        config = TrainConfig(image_size=16, patch_size=8, depth=2,
                             hidden_dim=48, heads=3, mlp_ratio=2.0,
                             head_output_dim=16, prototypes=16,
                             warmup_steps=1, steps=10)
        for n in [1, 2, 4]:
            T.reset_mac_count()
            _forward(config, n, batch=2, mode="eval")
            assert T.mac_count() == 2 * forward_macs(config, n)

    def test_backward_doubles_forward_multiplies(self):
        # with every input trainable, each GEMM reappears twice in backward
        config = desk_preset()
        T.reset_mac_count()
        preds = _forward(config, 6, batch=4, mode="train", tokens_grad=True)
        fwd = T.mac_count()
        T.tsum(T.mul(preds, preds)).backward()
        assert T.mac_count() == 3 * fwd

    def test_flops_twice_macs(self):
        config = desk_preset()
        assert flops_forward(config, 13) == 2 * forward_macs(config, 13)

    def test_strictly_monotone_in_kept_patches(self):
        config = desk_preset()
        costs = [flops_forward(config, n) for n in range(1, 65)]
        assert all(b > a for a, b in zip(costs, costs[1:]))

    def test_masked_view_cheaper_than_ratio(self):
        config = desk_preset()
        grid = config.encoder_config().grid
        n = kept_patches(MaskSpec(kind="random", ratio=0.7), grid)
        assert flops_forward(config, n) <= 0.7 * flops_forward(config, grid * grid)

    def test_rejects_empty_sequence(self):
        with pytest.raises(ParameterError):
            forward_macs(desk_preset(), 0)


class TestKeptPatches:
    def test_kinds(self):
        assert kept_patches(MaskSpec(kind="none"), 8) == 64
        assert kept_patches(MaskSpec(kind="random", ratio=0.7), 8) == 20
        assert kept_patches(MaskSpec(kind="focal"), 8) == 9
        assert kept_patches(MaskSpec(kind="focal", block_h=2, block_w=5), 8) == 10

    def test_random_never_empty(self):
        assert kept_patches(MaskSpec(kind="random", ratio=0.99), 8) == 1


@pytest.fixture(scope="module")
def tiny():
    return TrainConfig(batch_size=8, per_class=8, steps=10, warmup_steps=1)


class TestMeasurement:

    def test_view_time_positive(self, tiny):
        ms = measure_view_ms(tiny, 4, repeats=2)
        assert np.isfinite(ms) and ms > 0

    def test_view_time_rejects_oversized(self, tiny):
        with pytest.raises(ParameterError):
            measure_view_ms(tiny, 65, repeats=1)
        with pytest.raises(ParameterError):
            measure_view_ms(tiny, 4, repeats=0)

    def test_step_cost(self, tiny):
        cost = measure_step(tiny, steps=2, warmup=1)
        assert cost.step_ms > 0
        assert cost.peak_bytes > 0

    def test_sweep_shapes(self, tiny):
        pts = masking_sweep(tiny, [0.0, 0.5, 0.9], repeats=1)
        assert [p.n_patches for p in pts] == [64, 32, 7]
        assert pts[0].flops > pts[1].flops > pts[2].flops
        assert all(p.ms > 0 for p in pts)

    def test_cost_report(self, tiny):
        report = cost_report(tiny, repeats=1, steps=1)
        assert isinstance(report, CostReport)
        assert report.target.n_patches == 64
        assert [a.kind for a in report.anchors] == ["random", "focal", "focal"]
        assert [a.n_patches for a in report.anchors] == [20, 9, 9]
        assert 0 < report.flop_ratio < 1
        assert report.step.peak_bytes > 0
