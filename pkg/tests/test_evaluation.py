import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from conftest import blob_set, tiny_model
from tvae import evaluation as ev
from tvae.augmentation import AugConfig
from tvae.latent_algebra import LatentTransform, identity_tau
from tvae.networks import GaussianLatent
from tvae.objective import vae_loss


def exhaustive_knn(anchors, labels, queries, k):
    """Reference classifier: full scan, sort by (distance, index), vote with the documented tie rules."""
    preds = []
    for q in queries:
        dist = [math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(row, q))) for row in anchors]
        order = sorted(range(len(anchors)), key=lambda i: (dist[i], i))[:k]
        votes = {}
        for i in order:
            c = int(labels[i])
            n, s = votes.get(c, (0, 0.0))
            votes[c] = (n + 1, s + dist[i])
        best = max(n for n, _ in votes.values())
        tied = {c: s / n for c, (n, s) in votes.items() if n == best}
        low = min(tied.values())
        preds.append(min(c for c, m in tied.items() if m == low))
    return np.array(preds)


class TestKNN:
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_exhaustive_scan_continuous(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(800, 3))
        la = rng.integers(4, size=800)
        q = rng.normal(size=(200, 3))
        got = ev.knn_predict(a, la, q, k=5, chunk=64)
        assert np.array_equal(got, exhaustive_knn(a, la, q, 5))

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_exhaustive_scan_with_ties(self, seed):
        # integer grid points: many exactly equal distances and split votes
        rng = np.random.default_rng(100 + seed)
        a = rng.integers(-3, 4, size=(800, 2)).astype(np.float64)
        la = rng.integers(3, size=800)
        q = rng.integers(-3, 4, size=(200, 2)).astype(np.float64)
        for k in (1, 4, 5):
            got = ev.knn_predict(a, la, q, k=k, chunk=50)
            assert np.array_equal(got, exhaustive_knn(a, la, q, k))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 7), st.integers(1, 64))
    def test_partition_independent(self, seed, k, chunk):
        rng = np.random.default_rng(seed)
        a = rng.integers(0, 3, size=(40, 2)).astype(float)
        la = rng.integers(3, size=40)
        q = rng.integers(0, 3, size=(30, 2)).astype(float)
        assert np.array_equal(ev.knn_predict(a, la, q, k, chunk=chunk), ev.knn_predict(a, la, q, k, chunk=1000))

    def test_cluster_at_origin(self):
        a = np.zeros((5, 3))
        a = np.vstack([a, np.full((5, 3), 10.0)])
        la = np.array([2] * 5 + [7] * 5)
        assert ev.knn_predict(a, la, np.array([[0.1, 0, 0]]), 5)[0] == 2

    def test_query_equal_to_anchor(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(20, 4))
        la = rng.integers(5, size=20)
        assert np.array_equal(ev.knn_predict(a, la, a, 1), la)

    def test_vote_tie_uses_mean_distance_then_class(self):
        a = np.array([[1.0], [-1.0], [2.0], [-3.0]])
        la = np.array([1, 0, 1, 0])
        # 2 votes each; class 1 is closer on average
        assert ev.knn_predict(a, la, np.array([[0.0]]), 4)[0] == 1
        a = np.array([[1.0], [-1.0]])
        assert ev.knn_predict(a, np.array([5, 3]), np.array([[0.0]]), 2)[0] == 3

    def test_errors(self):
        with pytest.raises(ValueError, match="no anchors"):
            ev.knn_predict(np.zeros((0, 2)), np.zeros(0, dtype=int), np.zeros((1, 2)))
        with pytest.raises(ValueError, match="k=6"):
            ev.knn_predict(np.zeros((5, 2)), np.zeros(5, dtype=int), np.zeros((1, 2)), k=6)

    def test_accuracy(self):
        a = ev.EmbeddingSet(np.array([[0.0], [10.0]]), np.array([0, 1]))
        q = ev.EmbeddingSet(np.array([[1.0], [9.0], [2.0]]), np.array([0, 1, 1]))
        assert ev.knn_classify(a, q, 1) == pytest.approx(2 / 3)


class DegenerateModel(nn.Module):
    """q(z|x) = N(0, I) = prior and a decoder with constant logits."""

    z_dim = 3

    def __init__(self, logit=0.3):
        super().__init__()
        self.logit = nn.Parameter(torch.tensor(logit, dtype=torch.float64))

    def encode(self, x):
        zeros = torch.zeros(len(x), self.z_dim, dtype=torch.float64)
        return GaussianLatent(zeros, zeros.clone())

    def decode(self, z):
        return self.logit.expand(len(z), 1, 4, 4)


class TestMarginalLikelihood:
    @pytest.mark.parametrize("K", [1, 7, 1000])
    def test_degenerate_case_exact(self, K):
        model = DegenerateModel()
        x = torch.rand(5, 1, 4, 4, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        with torch.no_grad():
            c = -nn.functional.binary_cross_entropy_with_logits(
                model.decode(torch.zeros(5, 3)), x, reduction="none").reshape(5, -1).sum(-1)
        got = ev.marginal_ll(model, x, K, torch.Generator().manual_seed(1), chunk=64)
        assert torch.equal(got, c)

    def test_log_mean_exp(self):
        w = torch.tensor([[0.0, math.log(3.0)], [1000.0, 1000.0]], dtype=torch.float64)
        torch.testing.assert_close(ev.log_mean_exp(w), torch.tensor([math.log(2.0), 1000.0], dtype=torch.float64))

    def test_rejects_zero_samples(self):
        with pytest.raises(ValueError):
            ev.marginal_ll(DegenerateModel(), torch.zeros(1, 1, 4, 4), 0)

    def test_k_ordering_over_repeats(self):
        model = tiny_model(kind="vae", z_dim=2)
        x = torch.rand(1, 1, 8, 8, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
        reps = x.expand(10_000, -1, -1, -1)
        g = torch.Generator().manual_seed(4)
        k1 = ev.marginal_ll(model, reps, 1, g, chunk=10_000)
        k100 = ev.marginal_ll(model, reps, 100, g, chunk=10_000)
        se = math.sqrt(k1.var() / len(k1) + k100.var() / len(k100))
        assert k100.mean() >= k1.mean()
        assert k100.mean() - k1.mean() > 3 * se
        # K=1 is an unbiased ELBO draw: compare with the closed-form-KL estimator
        with torch.no_grad():
            elbo = -torch.stack([vae_loss(model, x, g).total for _ in range(2000)])
        se_elbo = math.sqrt(k1.var() / len(k1) + elbo.var() / len(elbo))
        assert abs(k1.mean() - elbo.mean()) < 5 * se_elbo
        # and the importance-sampled estimate sits above the ELBO
        assert k100.mean() > elbo.mean()


class TestEmbed:
    def test_shape_and_determinism(self):
        model = tiny_model(kind="vae", z_dim=3)
        data = blob_set(50, size=8)
        a, b = ev.embed(model, data, batch=7), ev.embed(model, data)
        assert a.vectors.shape == (50, 3)
        assert np.array_equal(a.vectors, b.vectors)
        assert np.array_equal(a.labels, data.labels)

    def test_permutation_equivariant_and_duplicates(self):
        model = tiny_model(kind="vae", z_dim=3)
        imgs = torch.rand(10, 1, 8, 8, generator=torch.Generator().manual_seed(0))
        perm = torch.randperm(10, generator=torch.Generator().manual_seed(1))
        base = ev.embed(model, imgs).vectors
        np.testing.assert_allclose(ev.embed(model, imgs[perm]).vectors, base[perm.numpy()], rtol=0, atol=1e-12)
        dup = ev.embed(model, torch.cat([imgs[:1], imgs[:1]])).vectors
        assert np.array_equal(dup[0], dup[1])

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            ev.EmbeddingSet(np.array([[np.nan]]), np.array([0]))


class TestCurves:
    def test_full_fraction_single_repeat_matches_knn(self):
        rng = np.random.default_rng(0)
        a = ev.EmbeddingSet(rng.normal(size=(100, 2)), rng.integers(3, size=100))
        q = ev.EmbeddingSet(rng.normal(size=(40, 2)), rng.integers(3, size=40))
        curve = ev.sample_efficiency_curve(a, q, [1.0], repeats=1)
        assert curve.mean[0] == ev.knn_classify(a, q)

    def test_reproducible_and_trend(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(4, size=2000)
        centers = rng.normal(scale=3, size=(4, 2))
        a = ev.EmbeddingSet(centers[labels] + rng.normal(size=(2000, 2)), labels)
        ql = rng.integers(4, size=300)
        q = ev.EmbeddingSet(centers[ql] + rng.normal(size=(300, 2)), ql)
        c1 = ev.sample_efficiency_curve(a, q, [0.005, 0.2], repeats=20, seed=3)
        c2 = ev.sample_efficiency_curve(a, q, [0.005, 0.2], repeats=20, seed=3)
        assert c1.to_csv() == c2.to_csv()
        assert c1.mean[1] > c1.mean[0]
        assert len(c1.seeds[0]) == 20

    def test_bad_fraction(self):
        e = ev.EmbeddingSet(np.zeros((10, 1)), np.zeros(10, dtype=int))
        with pytest.raises(ValueError, match="fraction"):
            ev.sample_efficiency_curve(e, e, [0.0])


class TestDemos:
    def test_transfer_grid_and_identity(self):
        model = tiny_model(variant="A", z_dim=4)
        imgs = torch.rand(9, 1, 8, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        grid = ev.transfer_transformation(model, (imgs[0], imgs[0], imgs[0]), imgs[1:])
        assert grid.shape == (3, 9, 8, 8)
        ident = identity_tau("A", 4, dtype=torch.float64)
        g = ev.transfer_transformation(model, (imgs[0], imgs[0], imgs[0]), imgs[1:], tau=ident)
        with torch.no_grad():
            recon = torch.sigmoid(model.decode(model.encode(imgs[1:]).mean))[:, 0]
        assert torch.equal(g[1, 1:], recon) and torch.equal(g[2, 1:], recon)

    def test_repeat_zero_steps_is_reconstruction(self):
        model = tiny_model(variant="M", z_dim=4)
        x = torch.rand(3, 1, 8, 8, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        res = ev.repeat_transformation(model, x[0], x[1], x[2], 0)
        assert res.grid.shape == (2, 1, 8, 8)
        with torch.no_grad():
            recon = torch.sigmoid(model.decode(model.encode(x[:1]).mean))[0, 0]
        assert torch.equal(res.grid[0, 0], recon)

    def test_repeat_composition_additive_exact(self):
        model = tiny_model(variant="A", z_dim=4, dtype=torch.float32)
        tau = LatentTransform("A", torch.tensor([[0.25, -0.5, 0.125, 1.0]]), 4)
        z0 = torch.tensor([[0.5, 0.75, -1.25, 2.0]])
        fwd, bwd = ev.repeat_latents(model, tau, z0, 6)
        for k in range(7):
            assert torch.equal(fwd[k:k + 1], model.act(tau.scaled(k), z0))
            assert torch.equal(bwd[k:k + 1], model.act_inverse(tau.scaled(k), z0))

    def test_repeat_composition_rotation(self):
        model = tiny_model(variant="M", z_dim=6, dtype=torch.float32)
        x = torch.rand(3, 1, 8, 8, generator=torch.Generator().manual_seed(2))
        tau = ev.infer_pair_tau(model, x[1:2], x[2:3])
        res = ev.repeat_transformation(model, x[0], x[1], x[2], 6)
        z0 = res.forward[:1]
        for k in range(7):
            assert (res.forward[k] - model.act(tau.scaled(k), z0)[0]).abs().max() < 1e-5
            assert (res.backward[k] - model.act_inverse(tau.scaled(k), z0)[0]).abs().max() < 1e-5

    def test_midpoint(self):
        model, base = tiny_model(variant="A", z_dim=3), tiny_model(kind="vae", z_dim=3)
        z = torch.randn(4, 3, dtype=torch.float64)
        assert torch.equal(ev.midpoint_latent(base, z, z), z)
        assert torch.equal(ev.midpoint_latent(model, z, z), model.aggregate(z, z).mean.detach())
        x = torch.rand(6, 1, 8, 8, dtype=torch.float64)
        rows = ev.interpolate_midpoint(model, base, x[:2], x[2:4], x[4:])
        assert rows.shape == (5, 2, 8, 8)

    def test_distance_profile(self):
        model = tiny_model(kind="vae", z_dim=3)
        img = torch.rand(8, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        angles = list(range(-20, 21, 2))
        prof = ev.latent_distance_profile(model, img, angles, 10, torch.Generator().manual_seed(0))
        assert prof.shape == (21 * 10, 3)
        means = ev.latent_distance_profile(model, img, [0.0], 10, use_means=True)
        assert np.all(means[:, 2] == 0.0)


class TestReport:
    @pytest.mark.parametrize("kind", ["tvae", "vae", "vae_plus"])
    def test_columns(self, kind):
        model = tiny_model(kind=kind, variant="A", z_dim=2)
        data = blob_set(30, size=8, split="test")
        aug = AugConfig(seed=0)
        r = ev.metrics_report(model, kind, data, aug, K=5, in_sample=(data, data))
        cells = dict(zip(["model", "r_chi", "zdim", *ev.REPORT_COLUMNS], r.cells()))
        assert r.elbo == r.nllx0 + r.kl0
        assert r.mll > 0 and r.nllx0 > 0
        assert cells["knn_out"] == "-"
        absent = {"c1", "c2", "nll", "div"}
        if kind == "tvae":
            assert all(cells[c] != "-" for c in absent | {"nllx1", "nllx2"})
        else:
            assert all(cells[c] == "-" for c in absent)
            assert (cells["nllx1"] == "-") == (kind == "vae")
        head, row = r.to_csv().splitlines()
        assert head.split(",")[3:] == list(ev.REPORT_COLUMNS)
        assert len(r.to_text().splitlines()) == 2
