import math

import numpy as np
import pytest
import torch

from earlywf.encoder import (
    ContrastiveBatch,
    EncoderConfig,
    EncoderModel,
    build_encoder,
    embed,
    make_batches,
    scl_loss,
    train_encoder,
)

SMALL = EncoderConfig(eta=16, rho=64, conv2d_channels=(4, 8), conv1d_channels=(8, 8, 16, 16), window_pool=2)


def scl_oracle(z, labels, gamma):
    """Direct loop evaluation of the per-anchor loss, averaged over valid anchors."""
    z = np.asarray(z, dtype=np.float64)
    losses = []
    for i in range(len(z)):
        P = [p for p in range(len(z)) if p != i and labels[p] == labels[i]]
        N = [n for n in range(len(z)) if labels[n] != labels[i]]
        if not P or not N:
            continue
        den = sum(math.exp(float(z[i] @ z[n]) / gamma) for n in N)
        losses.append(-sum(math.log(math.exp(float(z[i] @ z[p]) / gamma) / den) for p in P) / len(P))
    return sum(losses) / len(losses)


def random_batch(rng, size=8, dim=5, classes=3):
    labels = rng.integers(0, classes, size=size)
    labels[:2] = [0, 1]
    labels[2] = labels[0]
    z = rng.normal(size=(size, dim))
    return z / np.linalg.norm(z, axis=1, keepdims=True), labels


class TestSclLoss:
    def test_hand_values(self):
        z = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        assert scl_loss(z, ["a", "a", "b"], 1.0).item() == pytest.approx(-1.0, abs=1e-12)
        assert scl_loss(z, ["a", "a", "b"], 0.5).item() == pytest.approx(-2.0, abs=1e-12)

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            z, labels = random_batch(rng)
            got = scl_loss(torch.from_numpy(z), labels, 0.1).item()
            assert got == pytest.approx(scl_oracle(z, labels, 0.1), abs=1e-6)

    def test_worse_geometry_costs_more(self):
        good = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        bad = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
        labels = ["a", "a", "b", "b"]
        assert scl_loss(bad, labels, 0.1) > scl_loss(good, labels, 0.1)

    def test_excludes_lonely_anchors(self):
        z = torch.eye(3)
        with pytest.raises(ValueError):
            scl_loss(z, ["a", "b", "c"], 0.1)
        with pytest.raises(ValueError):
            scl_loss(z, ["a", "a", "a"], 0.1)

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(1)
        z, labels = random_batch(rng, size=6, dim=4)
        zt = torch.from_numpy(z).requires_grad_(True)
        scl_loss(zt, labels, 0.5).backward()
        h = 1e-6
        fd = np.zeros_like(z)
        for idx in np.ndindex(z.shape):
            zp, zm = z.copy(), z.copy()
            zp[idx] += h
            zm[idx] -= h
            fd[idx] = (scl_oracle(zp, labels, 0.5) - scl_oracle(zm, labels, 0.5)) / (2 * h)
        g = zt.grad.numpy()
        assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-4


class TestBatches:
    def test_contrastive_sets(self):
        b = ContrastiveBatch(np.arange(4), np.array(["A", "A", "B", "B"]))
        assert b.positives(0).tolist() == [1]
        assert b.negatives(0).tolist() == [2, 3]

    def test_balanced_and_reproducible(self):
        labels = np.repeat(["a", "b", "c", "d"], 10)
        first = [b.indices.tolist() for b in make_batches(labels, 8, seed=3, per_site=4)]
        again = [b.indices.tolist() for b in make_batches(labels, 8, seed=3, per_site=4)]
        assert first == again and len(first) == 5
        for b in make_batches(labels, 8, seed=3, per_site=4):
            _, counts = np.unique(b.labels, return_counts=True)
            assert len(counts) == 2 and set(counts) == {4}
        seen = {i for b in make_batches(labels, 8, seed=0, per_site=4, num_batches=20) for i in b.indices}
        assert seen == set(range(40))

    def test_needs_two_sites(self):
        with pytest.raises(ValueError):
            next(make_batches(["a"] * 5, 4))


class TestEncoder:
    def test_default_output(self):
        m = build_encoder(EncoderConfig(), seed=0)
        z = m.embed(np.random.default_rng(0).poisson(1.0, size=(2, 3, 2, 2000)))
        assert z.shape == (2, 128)
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-5)

    def test_determinism_and_paths(self):
        a, b = build_encoder(SMALL, seed=4), build_encoder(SMALL, seed=4)
        for pa, pb in zip(a.net.state_dict().values(), b.net.state_dict().values()):
            assert torch.equal(pa, pb)
        X = np.random.default_rng(1).poisson(2.0, size=(5, 3, 2, 64)).astype(np.float32)
        batch = a.embed(X)
        single = np.stack([embed(a, x) for x in X])
        np.testing.assert_allclose(batch, single, atol=1e-5)
        np.testing.assert_array_equal(a.embed(X), batch)
        zero = a.embed(np.zeros((3, 2, 64)))
        assert np.linalg.norm(zero) == pytest.approx(1.0, abs=1e-5)

    def test_shape_error(self):
        with pytest.raises(ValueError):
            build_encoder(SMALL).embed(np.zeros((3, 2, 65)))

    def test_config_errors(self):
        with pytest.raises(ValueError):
            EncoderConfig(conv2d_channels=(8,), conv2d_kernels=((1, 7), (2, 7)))
        with pytest.raises(ValueError):
            EncoderConfig(eta=1)
        with pytest.raises(ValueError):
            EncoderConfig(gamma=0)

    def test_training_separates_and_roundtrips(self, tmp_path):
        rng = np.random.default_rng(0)
        # two synthetic "sites": traffic concentrated in different window ranges
        X = np.zeros((48, 3, 2, 64), dtype=np.float32)
        X[:24, :, 0, :20] = rng.poisson(3, size=(24, 3, 20))
        X[24:, :, 1, 30:50] = rng.poisson(3, size=(24, 3, 20))
        y = np.repeat(["a", "b"], 24)
        model = train_encoder(X, SMALL, epochs=6, lr=3e-3, seed=0, batch_size=16, labels=y)
        hist = model.metadata["loss_history"]
        assert all(later < earlier for earlier, later in zip(hist[:5], hist[1:5]))
        Z = model.embed(X)
        sim = Z @ Z.T
        same = y[:, None] == y[None, :]
        off = ~np.eye(len(y), dtype=bool)
        assert sim[same & off].mean() > sim[~same].mean()
        path = model.save(tmp_path / "enc.npz")
        back = EncoderModel.load(path)
        for k, v in model.net.state_dict().items():
            assert torch.equal(v, back.net.state_dict()[k])
        np.testing.assert_array_equal(back.embed(X), Z)
        assert back.metadata["final_loss"] == hist[-1]
