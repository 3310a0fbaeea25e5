import dataclasses

import numpy as np
import pytest

from trifill import autodiff as ad
from trifill.autodiff import Tensor, tensor
from trifill.config import ModelConfig
from trifill.model import EdgeDiscriminator, Generator


def tiny_cfg(**kw):
    kw.setdefault("image_size", 16)
    kw.setdefault("base_channels", 4)
    kw.setdefault("heads", 2)
    return ModelConfig(**kw)


def make_inputs(size, n=1, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    image = rng.uniform(0, 1, size=(n, 3, size, size)).astype(dtype)
    mask = np.zeros((n, 1, size, size), dtype=dtype)
    mask[:, :, size // 4: 3 * size // 4, size // 4: 3 * size // 4] = 1.0
    return tensor(image * (1 - mask)), tensor(mask)


def test_generator_end_to_end_shapes():
    cfg = tiny_cfg()
    gen = Generator(cfg, seed=0)
    corrupted, mask = make_inputs(16, n=2)
    out = gen(corrupted, mask)
    assert out.image.shape == (2, 3, 16, 16)
    assert out.edge.shape == (2, 1, 16, 16)
    assert out.seg_logits.shape == (2, 4, 16, 16)
    assert out.composite.shape == (2, 3, 16, 16)
    assert np.all(np.isfinite(out.composite.data))


def test_generator_init_is_seed_deterministic():
    a = Generator(tiny_cfg(), seed=3)
    b = Generator(tiny_cfg(), seed=3)
    c = Generator(tiny_cfg(), seed=4)
    for (na, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)
    assert any(not np.array_equal(pa.data, pc.data)
               for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters()))


def test_encoder_init_independent_of_decoder_options():
    base = Generator(tiny_cfg(), seed=0)
    for changes in ({"fusion": "spade"}, {"biased_prior": True},
                    {"use_edge_branch": False}):
        other = Generator(tiny_cfg(**changes), seed=0)
        for (na, pa), (nb, pb) in zip(base.encoder.named_parameters(),
                                      other.encoder.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)


def test_float32_casts_params_and_outputs():
    gen = Generator(tiny_cfg(precision="float32"), seed=0)
    assert all(p.data.dtype == np.float32 for _, p in gen.named_parameters())
    corrupted, mask = make_inputs(16, dtype=np.float32)
    out = gen(corrupted, mask)
    assert out.image.data.dtype == np.float32

    # float32 params are the float64 init rounded once, not a different draw
    ref = Generator(tiny_cfg(), seed=0)
    for (_, p32), (_, p64) in zip(gen.named_parameters(), ref.named_parameters()):
        np.testing.assert_array_equal(p32.data, p64.data.astype(np.float32))


def test_generator_full_backward_populates_grads():
    gen = Generator(tiny_cfg(), seed=1)
    corrupted, mask = make_inputs(16)
    out = gen(corrupted, mask)
    loss = ad.mean(out.image * out.image) + ad.mean(out.edge) + ad.mean(out.seg_logits)
    loss.backward()
    missing = [n for n, p in gen.named_parameters() if p.grad is None]
    assert missing == []
    assert all(np.all(np.isfinite(p.grad)) for _, p in gen.named_parameters())


# ---------------------------------------------------------------------------
# discriminator


def test_discriminator_field_of_view():
    disc = EdgeDiscriminator(seed=0)
    x = tensor(np.random.default_rng(0).uniform(0, 1, size=(2, 1, 64, 64)))
    out = disc(x)
    assert out.shape == (2, 1, 2, 2)  # five stride-2 halvings of 64


def test_discriminator_weights_near_unit_spectral_norm():
    disc = EdgeDiscriminator(seed=1)
    for conv in disc.convs:
        w = (conv.weight.data / conv.sigma().data).reshape(conv.weight.shape[0], -1)
        top = float(np.sqrt(np.max(np.linalg.eigvalsh(w.T @ w))))
        assert abs(top - 1.0) <= 1e-3


def test_update_flag_controls_power_iterates():
    disc = EdgeDiscriminator(seed=2)
    x = tensor(np.random.default_rng(1).uniform(0, 1, size=(1, 1, 64, 64)))
    before = [conv.u.data.copy() for conv in disc.convs]
    disc(x, update=False)
    for conv, u in zip(disc.convs, before):
        np.testing.assert_array_equal(conv.u.data, u)
    # iterates are at a fixed point of the unchanged weight; perturb then update
    for conv in disc.convs:
        conv.weight.data = conv.weight.data[::-1].copy()
    disc(x, update=True)
    assert any(not np.array_equal(conv.u.data, u)
               for conv, u in zip(disc.convs, before))


def test_discriminator_gradients_flow_to_input():
    disc = EdgeDiscriminator(seed=3)
    x = tensor(np.random.default_rng(2).uniform(0, 1, size=(1, 1, 32, 32)),
               requires_grad=True)
    ad.mean(disc(x)).backward()
    assert x.grad is not None and np.any(x.grad != 0)
