import numpy as np
import pytest
import torch

from surgmotion.model import (
    ModelConfig,
    MotionModel,
    ParameterStore,
    load_checkpoint,
    save_checkpoint,
)

# Parameter scale used for "random parameters" throughout: training keeps
# magnitudes well inside this range, and the invertibility tolerance is
# stated on the working domain.
RAND_SCALE = 0.2


def tiny_model(dtype="float64", frames=4, seed=0):
    torch.manual_seed(seed)
    return MotionModel(ModelConfig(
        num_frames=frames, num_coupling_layers=2, conditioner_hidden=16,
        latent_dim=4, canonical_hidden=16, pe_octaves=2, dtype=dtype,
    ))


def randomize(model, seed=0, scale=RAND_SCALE):
    store = ParameterStore(model)
    g = torch.Generator().manual_seed(seed)
    store.set_flat(torch.randn(store.num_params, generator=g,
                               dtype=model.config.torch_dtype) * scale)
    return store


class TestBijection:
    def test_identity_at_init(self):
        model = tiny_model()
        x = torch.rand(50, 3, dtype=torch.float64) * 2 - 1
        u = model.map_to_canonical(x, 1)
        assert torch.equal(u, x)
        assert torch.equal(model.map_from_canonical(x, 1), x)

    def test_round_trip_random_params(self):
        model = tiny_model()
        randomize(model, seed=7)
        x = torch.rand(1000, 3, dtype=torch.float64) * 2 - 1
        u = model.map_to_canonical(x, 2)
        back = model.map_from_canonical(u, 2)
        assert (back - x).abs().max() < 1e-5

    def test_round_trip_many_seeds(self):
        for seed in range(5):
            model = tiny_model(seed=seed)
            randomize(model, seed=seed + 100)
            x = torch.rand(200, 3, dtype=torch.float64) * 2 - 1
            for frame in range(model.config.num_frames):
                u = model.map_to_canonical(x, frame)
                assert (model.map_from_canonical(u, frame) - x).abs().max() < 1e-5

    def test_same_frame_chain_identity(self):
        model = tiny_model()
        randomize(model, seed=3)
        x = torch.rand(100, 3, dtype=torch.float64) * 2 - 1
        chained = model.map_from_canonical(model.map_to_canonical(x, 1), 1)
        assert (chained - x).abs().max() < 1e-5

    def test_non_finite_input_rejected(self):
        model = tiny_model()
        bad = torch.tensor([[float("nan"), 0.0, 0.0]], dtype=torch.float64)
        with pytest.raises(ValueError, match="non-finite"):
            model.map_to_canonical(bad, 0)
        with pytest.raises(ValueError, match="non-finite"):
            model.map_from_canonical(bad, 0)

    def test_log_scale_bounded(self):
        # even with huge conditioner outputs the log-scale saturates at 6
        model = tiny_model()
        randomize(model, seed=1, scale=50.0)
        x = torch.rand(100, 3, dtype=torch.float64) * 2 - 1
        psi = model.latents[0].unsqueeze(0).expand(100, -1)
        for layer in model.layers:
            log_s, _ = layer._scale_shift(x, psi)
            assert log_s.abs().max() <= 6.0
        assert torch.isfinite(model.map_to_canonical(x, 0)).all()


class TestCanonicalNet:
    def test_density_nonnegative_color_in_range(self):
        for seed in range(10):
            model = tiny_model(seed=seed)
            randomize(model, seed=seed, scale=1.0)
            u = torch.rand(100, 3, dtype=torch.float64) * 2 - 1
            sigma, color = model.query_canonical(u)
            assert (sigma >= 0).all()
            assert (color >= 0).all() and (color <= 1).all()

    def test_density_gradient_finite_difference(self):
        model = tiny_model()
        store = randomize(model, seed=5)
        u = torch.rand(8, 3, dtype=torch.float64) * 2 - 1

        def sigma_sum(flat):
            store.set_flat(flat)
            s, _ = model.query_canonical(u)
            return s.sum()

        flat0 = store.get_flat().clone()
        store.zero_grads()
        loss = sigma_sum(flat0.clone().requires_grad_(False))
        # analytic gradient through the live parameters
        store.zero_grads()
        s, _ = model.query_canonical(u)
        s.sum().backward()
        grad = store.grads_flat().clone()

        eps = 1e-6
        # only canonical-net parameters matter for sigma; spot-check 30 of them
        rng = np.random.default_rng(0)
        nonzero = torch.nonzero(grad.abs() > 1e-12).flatten()
        idx = rng.choice(nonzero.numpy(), size=min(30, len(nonzero)), replace=False)
        for i in idx:
            plus = flat0.clone(); plus[i] += eps
            minus = flat0.clone(); minus[i] -= eps
            fd = (float(sigma_sum(plus)) - float(sigma_sum(minus))) / (2 * eps)
            assert abs(fd - float(grad[i])) <= 1e-4 * max(1.0, abs(fd))
        store.set_flat(flat0)

    def test_non_finite_input_rejected(self):
        model = tiny_model()
        with pytest.raises(ValueError, match="non-finite"):
            model.query_canonical(torch.tensor([[float("inf"), 0, 0]], dtype=torch.float64))


class TestParameterStore:
    def test_flat_round_trip(self):
        model = tiny_model()
        store = ParameterStore(model)
        flat = torch.randn(store.num_params, dtype=torch.float64)
        store.set_flat(flat)
        assert torch.equal(store.get_flat(), flat)

    def test_shape_mismatch_rejected(self):
        store = ParameterStore(tiny_model())
        with pytest.raises(ValueError, match="expected"):
            store.set_flat(torch.zeros(3, dtype=torch.float64))

    def test_sum_of_squares_gradient(self):
        model = tiny_model()
        store = randomize(model, seed=2)
        store.zero_grads()
        loss = sum((p ** 2).sum() for p in model.parameters())
        store.backward(loss)
        expected = 2 * store.get_flat()
        assert torch.allclose(store.grads_flat(), expected)

    def test_backward_accumulates(self):
        model = tiny_model()
        store = randomize(model, seed=2)
        store.zero_grads()
        for _ in range(2):
            loss = sum((p ** 2).sum() for p in model.parameters())
            store.backward(loss)
        assert torch.allclose(store.grads_flat(), 4 * store.get_flat())

    def test_zero_grads_resets_exactly(self):
        model = tiny_model()
        store = randomize(model, seed=2)
        loss = sum((p ** 2).sum() for p in model.parameters())
        store.backward(loss)
        store.zero_grads()
        assert (store.grads_flat() == 0).all()

    def test_non_scalar_loss_rejected(self):
        model = tiny_model()
        store = ParameterStore(model)
        with pytest.raises(ValueError, match="scalar"):
            store.backward(torch.zeros(3, dtype=torch.float64))


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        model = tiny_model(dtype="float32")
        randomize(model, seed=9)
        save_checkpoint(model, tmp_path / "m.smck")
        loaded = load_checkpoint(tmp_path / "m.smck")
        assert loaded.config.num_frames == model.config.num_frames
        assert torch.equal(ParameterStore(loaded).get_flat(),
                           ParameterStore(model).get_flat())

    def test_magic_checked(self, tmp_path):
        (tmp_path / "bad.smck").write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(ValueError, match="SMCK"):
            load_checkpoint(tmp_path / "bad.smck")
