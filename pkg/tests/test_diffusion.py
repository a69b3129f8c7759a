import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from examrec import ConfigError
from examrec.diffusion import (
    DenoiserNet,
    GateState,
    elbo_loss,
    elbo_weights,
    forward_diffuse,
    gate,
    gated_elbo,
    load_subgraph,
    make_schedule,
    posterior_coefficients,
    rebuild_subgraph,
    reverse_denoise,
    save_subgraph,
    with_demographics,
)
from examrec.ehr_graph import SyntheticConfig, build_hetero_graph, generate_synthetic
from tests.gradcheck import check_params


class FakeGraph:
    def __init__(self, n):
        self.patient_ids = tuple(range(n))


class TestSchedule:
    def test_midpoint(self):
        sch = make_schedule(0.5, 0.2, 0.8, 5)
        assert 1 - sch.alpha_bar[2] == pytest.approx(0.25, abs=1e-15)

    def test_two_steps(self):
        sch = make_schedule(1.0, 0.1, 0.9, 2)
        np.testing.assert_allclose(sch.alpha_bar, [0.9, 0.1], atol=1e-15)
        np.testing.assert_allclose(sch.beta, [0.1, 1 - 0.1 / 0.9], atol=1e-15)

    @pytest.mark.parametrize("args", [(1.0, 0.5, 0.5, 10), (1.0, 0.0, 0.5, 10), (1.2, 0.1, 0.2, 10),
                                      (0.5, 0.1, 0.2, 1)])
    def test_rejects_invalid(self, args):
        with pytest.raises(ConfigError):
            make_schedule(*args)

    @settings(max_examples=200, deadline=None)
    @given(s=st.floats(0.01, 1.0), lo=st.floats(0.001, 0.49), gap=st.floats(0.01, 0.5),
           T=st.integers(2, 1000))
    def test_identity_property(self, s, lo, gap, T):
        up = min(lo + gap, 0.99)
        sch = make_schedule(s, lo, up, T)
        t = np.arange(1, T + 1)
        expected = s * (lo + (t - 1) / (T - 1) * (up - lo))
        np.testing.assert_allclose(1 - sch.alpha_bar, expected, rtol=0, atol=1e-12)
        assert np.all(np.diff(sch.alpha_bar) < 0)
        assert np.all((sch.beta >= 0) & (sch.beta < 1))


class TestForward:
    def test_zero_noise(self):
        sch = make_schedule(0.5, 0.1, 0.9, 10)
        x0 = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
        out = forward_diffuse(x0, 4, sch, torch.zeros(3, dtype=torch.float64))
        torch.testing.assert_close(out, math.sqrt(sch.alpha_bar[3]) * x0)

    def test_zero_scale_is_identity(self):
        sch = make_schedule(0.0, 0.1, 0.9, 10)
        x0 = torch.rand(5, dtype=torch.float64)
        out = forward_diffuse(x0, 7, sch, torch.randn(5, dtype=torch.float64))
        torch.testing.assert_close(out, x0)

    def test_step_out_of_range(self):
        sch = make_schedule(0.5, 0.1, 0.9, 10)
        with pytest.raises(ValueError):
            forward_diffuse(torch.zeros(2), 11, sch, torch.zeros(2))
        with pytest.raises(ValueError):
            forward_diffuse(torch.zeros(2), 0, sch, torch.zeros(2))

    def test_monte_carlo_moments(self):
        sch = make_schedule(0.8, 0.1, 0.9, 20)
        gen = torch.Generator().manual_seed(0)
        x0 = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
        n = 10_000
        for t in (1, 5, 10, 15, 20):
            noise = torch.randn((n, 4), generator=gen, dtype=torch.float64)
            xs = forward_diffuse(x0.expand(n, 4), torch.full((n,), t), sch, noise).numpy()
            ab = sch.alpha_bar[t - 1]
            var = 1 - ab
            se_mean = math.sqrt(var / n)
            se_var = var * math.sqrt(2 / (n - 1))
            assert np.all(np.abs(xs.mean(0) - math.sqrt(ab) * x0.numpy()) < 3 * se_mean)
            assert np.all(np.abs(xs.var(0, ddof=1) - var) < 3 * se_var)


class OracleDenoiser(torch.nn.Module):
    def __init__(self, x0, offset=None):
        super().__init__()
        self.x0 = x0
        self.offset = offset if offset is not None else torch.zeros_like(x0)

    def forward(self, x_t, t):
        return self.x0 + self.offset


class TestElbo:
    def test_perfect_denoiser_zero(self):
        sch = make_schedule(0.5, 0.1, 0.9, 10)
        x0 = (torch.rand(6, 8) > 0.5).double()
        gen = torch.Generator().manual_seed(1)
        assert elbo_loss(x0, OracleDenoiser(x0), sch, gen).item() == 0.0

    def test_two_step_weight(self):
        sch = make_schedule(1.0, 0.1, 0.9, 2)
        x0 = torch.zeros(1, 3, dtype=torch.float64)
        offset = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
        loss = elbo_loss(x0, OracleDenoiser(x0, offset), sch, torch.Generator(), t=torch.tensor([2]))
        assert loss.item() == pytest.approx(0.5 * (0.9 / 0.1 - 0.1 / 0.9))
        loss1 = elbo_loss(x0, OracleDenoiser(x0, offset), sch, torch.Generator(), t=torch.tensor([1]))
        assert loss1.item() == pytest.approx(1.0)

    def test_weights_positive_over_long_schedule(self):
        sch = make_schedule(0.1, 0.001, 0.01, 1000)
        w = elbo_weights(np.arange(1, 1001), sch)
        assert np.all(w > 0)
        t = np.arange(2, 1001)
        ab, abp = sch.alpha_bar[t - 1], sch.alpha_bar[t - 2]
        np.testing.assert_allclose(w[1:], 0.5 * (abp / (1 - abp) - ab / (1 - ab)))

    def test_denoiser_gradients(self):
        torch.manual_seed(0)
        sch = make_schedule(0.5, 0.05, 0.5, 8)
        net = DenoiserNet(6, step_dim=4, hidden=5).double()
        x0 = (torch.rand(4, 6, generator=torch.Generator().manual_seed(2)) > 0.5).double()
        t = torch.tensor([1, 3, 5, 8])

        def f():
            return elbo_loss(x0, net, sch, torch.Generator().manual_seed(7), t=t)

        errors = check_params(f, dict(net.named_parameters()), max_entries=40)
        assert max(errors.values()) < 1e-4, errors


class TestGate:
    def history(self, deltas, start=10.0):
        losses = [start]
        for d in deltas:
            losses.append(losses[-1] + d)
        return losses

    def run(self, deltas, current_delta, eps=0.3):
        state = GateState(delta=len(deltas), epsilon=eps)
        for loss in self.history(deltas):
            gate(state, loss)
        prev = state.history[-1]
        return gate(state, prev + current_delta)

    def test_above_mean_opens(self):
        assert self.run([0.1, 0.2, 0.3], 0.25) == 1.0

    def test_below_mean_suppresses(self):
        assert self.run([0.1, 0.2, 0.3], 0.1, eps=0.3) == 0.3

    def test_warm_up(self):
        state = GateState(delta=3, epsilon=0.2)
        assert gate(state, 5.0) == 1.0
        assert gate(state, 1.0) == 1.0

    def test_rejects_bad_params(self):
        with pytest.raises(ConfigError):
            GateState(delta=1)
        with pytest.raises(ConfigError):
            GateState(epsilon=0.0)

    def test_gated_product(self):
        sch = make_schedule(1.0, 0.1, 0.9, 2)
        x0 = torch.zeros(1, 3, dtype=torch.float64)
        offset = torch.tensor([[1.0, 1.0, 0.0]], dtype=torch.float64) * math.sqrt(2.5)
        state = GateState(delta=2, epsilon=0.2)
        for loss in (3.0, 2.0, 1.0):
            gate(state, loss)
        # change +0.0 is above the mean change of -1 -> open; then -5 is below -> eps
        ungated = elbo_loss(x0, OracleDenoiser(x0, offset), sch, torch.Generator(), t=torch.tensor([1]))
        assert ungated.item() == pytest.approx(5.0)
        out = gated_elbo(x0, OracleDenoiser(x0, offset), sch, state, -4.0, torch.Generator(),
                         t=torch.tensor([1]))
        assert out.item() == pytest.approx(1.0)

    def test_eps_one_matches_ungated(self):
        sch = make_schedule(0.5, 0.1, 0.9, 10)
        torch.manual_seed(0)
        net = DenoiserNet(5, step_dim=4)
        x0 = (torch.rand(3, 5) > 0.5).float()
        state = GateState(delta=2, epsilon=1.0)
        for loss in [5.0, 4.0, 3.5, 3.4, 1.0, 9.0]:
            a = gated_elbo(x0, net, sch, state, loss, torch.Generator().manual_seed(3))
            b = elbo_loss(x0, net, sch, torch.Generator().manual_seed(3))
            assert a.item() == b.item()

    @settings(max_examples=100, deadline=None)
    @given(losses=st.lists(st.floats(-100, 100), min_size=1, max_size=20),
           delta=st.integers(2, 6), eps=st.floats(0.01, 1.0))
    def test_codomain(self, losses, delta, eps):
        state = GateState(delta=delta, epsilon=eps)
        for x in losses:
            assert gate(state, x) in (1.0, eps)


class TestReverse:
    def test_zero_steps_identity(self):
        sch = make_schedule(0.5, 0.1, 0.9, 10)
        x = torch.rand(2, 4)
        assert reverse_denoise(x, 0, sch, None) is x

    def test_fixed_point(self):
        sch = make_schedule(0.5, 0.1, 0.9, 10)
        r = torch.tensor([[0.3, -1.0, 2.0]], dtype=torch.float64)
        for T_inf in (1, 4, 10):
            out = reverse_denoise(torch.zeros(1, 3, dtype=torch.float64), T_inf, sch, OracleDenoiser(r))
            torch.testing.assert_close(out, r)

    def test_out_of_range(self):
        sch = make_schedule(0.5, 0.1, 0.9, 10)
        with pytest.raises(ValueError):
            reverse_denoise(torch.zeros(1, 2), 11, sch, None)

    def test_posterior_mean_consistency(self):
        # noise-free x_t = sqrt(ab_t) * x0 must map to sqrt(ab_{t-1}) * x0
        sch = make_schedule(0.5, 0.01, 0.6, 200)
        for t in range(1, 201):
            c0, ct = posterior_coefficients(t, sch)
            ab_t = sch.alpha_bar_at(t)
            ab_prev = sch.alpha_bar_at(t - 1)
            assert c0 + ct * math.sqrt(ab_t) == pytest.approx(math.sqrt(ab_prev), abs=1e-12)
        assert posterior_coefficients(1, sch) == pytest.approx((1.0, 0.0))


class TestRebuild:
    def test_top_two(self):
        sub = rebuild_subgraph(np.array([[0.9, 0.1, 0.8, 0.3]]), 2, FakeGraph(1))
        assert set(np.flatnonzero(sub.adjacency[0])) == {0, 2}

    def test_saturation(self):
        sub = rebuild_subgraph(np.array([[0.9, 0.1, 0.8]]), 5, FakeGraph(1))
        assert sub.adjacency.tolist() == [[1, 1, 1]]

    def test_ties_to_lower_index(self):
        sub = rebuild_subgraph(np.full((1, 4), 0.5), 2, FakeGraph(1))
        assert set(np.flatnonzero(sub.adjacency[0])) == {0, 1}

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 1000), k=st.integers(1, 12))
    def test_cardinality_and_monotonic(self, seed, k):
        rng = np.random.default_rng(seed)
        scores = rng.integers(0, 4, size=(5, 9)).astype(float)  # many ties
        a = rebuild_subgraph(scores, k, FakeGraph(5)).adjacency
        b = rebuild_subgraph(scores, k + 1, FakeGraph(5)).adjacency
        assert np.all(a.sum(1) == min(k, 9))
        assert np.all(b >= a)

    def test_demographics_reimposed(self):
        ds = generate_synthetic(SyntheticConfig(n_patients=10, seed=0))
        g = build_hetero_graph(ds)
        scores = np.zeros(g.adjacency.shape)
        sub = with_demographics(rebuild_subgraph(scores, 2, g), g)
        mask = g.demographic_mask
        assert np.all(sub.adjacency[:, mask] >= g.adjacency[:, mask])

    def test_edge_list_round_trip(self, tmp_path):
        sch = make_schedule(0.1, 0.001, 0.01, 50)
        rng = np.random.default_rng(0)
        sub = rebuild_subgraph(rng.random((4, 7)), 3, type("G", (), {"patient_ids": (5, 6, 8, 9)}))
        save_subgraph(sub, sch, tmp_path / "g.tsv")
        loaded, h = load_subgraph(tmp_path / "g.tsv", sub.patient_ids)
        assert h == sch.hash()
        assert loaded.k == 3
        np.testing.assert_array_equal(loaded.adjacency, sub.adjacency)
        assert (tmp_path / "g.tsv").read_text().startswith("#subgraph k=3 schedule=")
