"""Network construction, conditioning probes and checkpointing."""

import numpy as np
import pytest
import torch

from diffad.data import NormStats
from diffad.denoiser import (Checkpoint, DenoiserConfig, DenoiserInput,
                             DenoiserParams, build_denoiser, load_checkpoint,
                             predict_noise, save_checkpoint)
from diffad.diffusion import build_schedule
from diffad.masking import grating_masks
from diffad.training import TrainConfig, Trainer


def small_config(**kw):
    base = dict(n_features=3, n_blocks=2, hidden_dim=16, n_heads=2,
                step_embed_dim=16, feature_embed_dim=4, time_embed_dim=16,
                ff_dim=16, T=8)
    base.update(kw)
    return DenoiserConfig(**base)


def make_input(rng, W=20, K=3, t=3, policy=0):
    pair = grating_masks(W, K, 2, 2)
    vals = rng.standard_normal((W, K))
    return DenoiserInput(masked_channel=vals * (1 - pair.m0),
                         reference_channel=vals * pair.m0,
                         mask=pair.m0, t=t, policy=policy)


def one_training_step(params, rng, W=20, K=3):
    sched = build_schedule(params.config.T, 1e-3, 0.3)
    trainer = Trainer(params, sched, TrainConfig(epochs=1, batch_size=4))
    pair = grating_masks(W, K, 2, 2)
    x0 = rng.standard_normal((4, W, K))
    trainer.step(x0, [(pair.m0, 0), (pair.m1, 1)], rng=rng)
    return params


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        small_config(hidden_dim=130, n_heads=8)
    with pytest.raises(ValueError):
        small_config(n_blocks=0)
    with pytest.raises(ValueError):
        small_config(feature_embed_dim=-1)


def test_zero_init_output():
    params = build_denoiser(small_config(), seed=0)
    rng = np.random.default_rng(0)
    for t in (1, 4, 8):
        out = predict_noise(params, make_input(rng, t=t))
        assert np.all(out == 0.0)


def test_build_deterministic():
    a = build_denoiser(small_config(), seed=3)
    b = build_denoiser(small_config(), seed=3)
    for pa, pb in zip(a.module.parameters(), b.module.parameters()):
        assert torch.equal(pa, pb)
    c = build_denoiser(small_config(), seed=4)
    assert any(not torch.equal(pa, pc) for pa, pc in
               zip(a.module.parameters(), c.module.parameters()))


def test_output_shape_matches_input():
    params = build_denoiser(DenoiserConfig(
        n_features=8, n_blocks=1, hidden_dim=16, n_heads=2,
        step_embed_dim=16, feature_embed_dim=4, time_embed_dim=16, T=8),
        seed=0)
    rng = np.random.default_rng(1)
    out = predict_noise(params, make_input(rng, W=100, K=8))
    assert out.shape == (100, 8)


def test_input_validation():
    rng = np.random.default_rng(0)
    pair = grating_masks(8, 2, 1, 1)
    vals = rng.standard_normal((8, 2))
    with pytest.raises(ValueError, match="observed"):
        DenoiserInput(masked_channel=vals, reference_channel=vals * pair.m0,
                      mask=pair.m0, t=1, policy=0)
    with pytest.raises(ValueError, match="masked"):
        DenoiserInput(masked_channel=vals * (1 - pair.m0),
                      reference_channel=vals, mask=pair.m0, t=1, policy=0)


def test_feature_index_permutation_changes_output():
    params = build_denoiser(small_config(), seed=0)
    rng = np.random.default_rng(2)
    params = one_training_step(params, rng)
    inp = make_input(rng)
    base = predict_noise(params, inp)
    permuted = DenoiserInput(
        masked_channel=inp.masked_channel, reference_channel=inp.reference_channel,
        mask=inp.mask, t=inp.t, policy=inp.policy,
        feature_index=np.array([2, 0, 1]))
    assert np.abs(predict_noise(params, permuted) - base).max() > 0


def test_step_embedding_sensitivity():
    params = build_denoiser(small_config(), seed=0)
    rng = np.random.default_rng(3)
    params = one_training_step(params, rng)
    pair = grating_masks(20, 3, 2, 2)
    vals = rng.standard_normal((20, 3))
    outs = []
    for t in (1, params.config.T):
        inp = DenoiserInput(masked_channel=vals * (1 - pair.m0),
                            reference_channel=vals * pair.m0,
                            mask=pair.m0, t=t, policy=0)
        outs.append(predict_noise(params, inp))
    assert np.abs(outs[0] - outs[1]).max() > 0


def test_policy_embedding_sensitivity():
    params = build_denoiser(small_config(), seed=0)
    rng = np.random.default_rng(4)
    params = one_training_step(params, rng)
    inp = make_input(rng)
    a = predict_noise(params, inp)
    b = predict_noise(params, DenoiserInput(
        masked_channel=inp.masked_channel,
        reference_channel=inp.reference_channel,
        mask=inp.mask, t=inp.t, policy=1))
    assert np.abs(a - b).max() > 0


def test_no_spatial_feature_equivariance():
    """Without the feature-axis transformer and feature embeddings, the
    network processes features independently and identically."""
    cfg = small_config(use_spatial=False, feature_embed_dim=0)
    params = build_denoiser(cfg, seed=0)
    rng = np.random.default_rng(5)
    params = one_training_step(params, rng)
    inp = make_input(rng)
    base = predict_noise(params, inp)
    perm = np.array([2, 0, 1])
    shuffled = DenoiserInput(
        masked_channel=inp.masked_channel[:, perm],
        reference_channel=inp.reference_channel[:, perm],
        mask=inp.mask[:, perm], t=inp.t, policy=inp.policy)
    out = predict_noise(params, shuffled)
    assert np.allclose(out, base[:, perm], atol=1e-6)


def test_no_temporal_locality():
    """Without the time-axis transformer, output at a timestep depends only
    on inputs at that timestep."""
    cfg = small_config(use_temporal=False)
    params = build_denoiser(cfg, seed=0)
    rng = np.random.default_rng(6)
    params = one_training_step(params, rng)
    inp = make_input(rng)
    base = predict_noise(params, inp)
    perturbed_vals = inp.masked_channel.copy()
    row = int(np.flatnonzero(inp.mask[:, 0] == 0)[0])
    perturbed_vals[row] += 1.5 * (1 - inp.mask[row])
    out = predict_noise(params, DenoiserInput(
        masked_channel=perturbed_vals,
        reference_channel=inp.reference_channel,
        mask=inp.mask, t=inp.t, policy=inp.policy))
    diff_rows = np.flatnonzero(np.abs(out - base).max(axis=1) > 0)
    assert diff_rows.tolist() == [row]


def test_non_finite_output_reported():
    params = build_denoiser(small_config(), seed=0)
    with torch.no_grad():
        params.module.head2.bias.fill_(float("nan"))
    rng = np.random.default_rng(7)
    from diffad.denoiser import NonFiniteOutputError
    with pytest.raises(NonFiniteOutputError):
        predict_noise(params, make_input(rng))


def test_checkpoint_round_trip(tmp_path):
    params = build_denoiser(small_config(), seed=0)
    rng = np.random.default_rng(8)
    params = one_training_step(params, rng)
    params.trained = True
    sched = build_schedule(8, 1e-3, 0.3)
    stats = NormStats(center=np.array([0.0, 1.0, 2.0]),
                      scale=np.array([1.0, 2.0, 3.0]))
    inp = make_input(rng)
    before = predict_noise(params, inp)

    path = tmp_path / "model.pt"
    save_checkpoint(path, Checkpoint(params=params, schedule=sched,
                                     norm_stats=stats,
                                     meta={"mode": "imputation", "epoch": 1}))
    ckpt = load_checkpoint(path)
    after = predict_noise(ckpt.params, inp)
    assert np.abs(after - before).max() <= 1e-6
    assert ckpt.params.trained
    assert ckpt.schedule.T == 8
    assert np.allclose(ckpt.norm_stats.scale, stats.scale)
    assert ckpt.meta["mode"] == "imputation"


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt")


def test_predict_batch_k_mismatch():
    params = build_denoiser(small_config(), seed=0)
    with pytest.raises(ValueError, match="features"):
        params.predict_batch(np.zeros((1, 10, 5), dtype=np.float32),
                             np.zeros((1, 10, 5), dtype=np.float32),
                             np.array([1]), np.array([0]))
