import numpy as np
import pytest

from nextclip.clipseq import Role, TokenKind, patchify
from nextclip.errors import DomainError, NumericalError
from nextclip.sampler import (
    HistoryPredictor,
    SamplerConfig,
    autoregress,
    cfg_combine,
    euler_step,
    sample_clip,
)
from nextclip.videodata import SceneConfig, generate_scene


class FixedClipOracle:
    """Returns one fixed clean clip regardless of the input sequence."""

    def __init__(self, clip_latents):
        self.rows = np.concatenate(list(clip_latents), axis=0)  # [n*P, D]

    def predict_batch(self, seqs):
        return [self.rows.copy() for _ in seqs]


class FutureOracle:
    """Returns the true next clip, located by the noisy block's frame index.

    Both guidance branches of one batch get the same answer (keyed on the
    conditional entry), so guidance stays inert.
    """

    def __init__(self, truth_latents):
        self.truth = truth_latents  # [N_total, P, D]
        self.seen_lengths = []

    def predict_batch(self, seqs):
        cond = seqs[0]
        noisy_frames = sorted(
            {t.frame for t in cond.tokens if t.role == Role.NOISY}
        )
        n_clean = len({t.frame for t in cond.tokens if t.role == Role.CLEAN})
        start = n_clean  # noisy block begins right after the clean history
        rows = np.concatenate(
            [self.truth[start + i] for i in range(len(noisy_frames))], axis=0
        )
        self.seen_lengths.append([len(s) for s in seqs])
        return [rows.copy() for _ in seqs]


def video_latents(video, patch_size):
    return np.stack([patchify(f, patch_size).patches for f in video.frames])


# -- euler step ------------------------------------------------------------------


def test_euler_single_jump_reaches_prediction():
    psi = np.random.default_rng(0).standard_normal((2, 3))
    x0 = np.random.default_rng(1).standard_normal((2, 3))
    assert np.array_equal(euler_step(psi, x0, 0.0, 1.0), x0)


def test_euler_fixed_point():
    psi = np.random.default_rng(2).standard_normal((4,))
    out = euler_step(psi, psi, 0.25, 0.5)
    assert np.allclose(out, psi)


def test_euler_rejects_bad_ordering():
    x = np.zeros(2)
    for a, b in [(0.5, 0.5), (0.7, 0.2), (-0.1, 0.5), (0.5, 1.1)]:
        with pytest.raises(DomainError):
            euler_step(x, x, a, b)


def test_euler_snaps_near_terminal_alpha():
    psi = np.ones(3)
    x0 = np.full(3, 5.0)
    out = euler_step(psi, x0, 1.0 - 1e-9, 1.0)
    assert np.array_equal(out, x0)


@pytest.mark.parametrize("m", [1, 2, 5, 50])
def test_euler_telescopes_to_constant_prediction(m):
    # With a constant predictor, any uniform schedule lands exactly on it.
    rng = np.random.default_rng(3)
    psi = rng.standard_normal((4, 4))
    target = rng.uniform(0, 1, (4, 4))
    for j in range(m):
        psi = euler_step(psi, target, j / m, (j + 1) / m)
    assert np.abs(psi - target).max() < 1e-6


# -- guidance blend ---------------------------------------------------------------


def test_cfg_exact_at_zero_and_one():
    cond = np.random.default_rng(0).standard_normal((3, 3))
    uncond = np.random.default_rng(1).standard_normal((3, 3))
    assert np.array_equal(cfg_combine(cond, uncond, 1.0), cond)
    assert np.array_equal(cfg_combine(cond, uncond, 0.0), uncond)


def test_cfg_affine_in_scale():
    cond = np.random.default_rng(2).standard_normal((2, 2))
    uncond = np.random.default_rng(3).standard_normal((2, 2))
    for c in (0.5, 2.0, 3.0):
        assert np.allclose(cfg_combine(cond, uncond, c), uncond + c * (cond - uncond))


def test_sampler_defaults_match_validated_settings():
    cfg = SamplerConfig()
    assert cfg.cfg_scale == 3.0
    assert cfg.frames_per_clip == 32


# -- sample_clip --------------------------------------------------------------------


def oracle_setup(num_frames=6, patch_size=4):
    video = generate_scene(
        SceneConfig("bouncing_ball", 8, 8, num_frames=num_frames, seed=9,
                    radius=1.5, velocity=(1.0, 0.5))
    )
    return video, video_latents(video, patch_size)


@pytest.mark.parametrize("m", [1, 2, 5, 50])
def test_oracle_exactness(m):
    video, latents = oracle_setup()
    oracle = FixedClipOracle(latents[2:4])
    cfg = SamplerConfig(steps=m, cfg_scale=3.0, frames_per_clip=2, seed=21)
    out = sample_clip([video.frames[:2]], cfg, oracle, patch_size=4)
    assert np.abs(out - video.frames[2:4]).max() < 1e-6


@pytest.mark.parametrize("scale", [0.0, 1.0, 3.0])
def test_oracle_exact_for_any_guidance_scale(scale):
    video, latents = oracle_setup()
    oracle = FixedClipOracle(latents[2:4])
    cfg = SamplerConfig(steps=4, cfg_scale=scale, frames_per_clip=2, seed=5)
    out = sample_clip([video.frames[:2]], cfg, oracle, patch_size=4)
    assert np.abs(out - video.frames[2:4]).max() < 1e-6


def test_sample_clip_deterministic():
    from nextclip.model import ClipTransformer, ModelConfig

    video, _ = oracle_setup()
    model = ClipTransformer(
        ModelConfig(depth=1, width=16, heads=2, patch_dim=16, max_frames=16, seed=0)
    )
    cfg = SamplerConfig(steps=2, cfg_scale=3.0, frames_per_clip=2, seed=77)
    pred = HistoryPredictor(model)
    a = sample_clip([video.frames[:2]], cfg, pred, patch_size=4)
    b = sample_clip([video.frames[:2]], cfg, pred, patch_size=4)
    assert np.array_equal(a, b)


def test_sample_clip_empty_history_unconditional():
    _, latents = oracle_setup()
    oracle = FixedClipOracle(latents[:2])
    cfg = SamplerConfig(steps=3, cfg_scale=3.0, frames_per_clip=2, seed=1)
    out = sample_clip([], cfg, oracle, geometry=(1, 8, 8), patch_size=4)
    assert out.shape == (2, 1, 8, 8)


# -- autoregression -----------------------------------------------------------------


def test_autoregress_zero_clips_empty():
    video, _ = oracle_setup()
    cfg = SamplerConfig(steps=1, frames_per_clip=2, seed=0)
    out = autoregress(video.frames[:2], 0, cfg, predictor=None, patch_size=4)
    assert out.num_frames == 0


def test_autoregress_single_clip_equals_sample_clip():
    video, latents = oracle_setup()
    oracle = FixedClipOracle(latents[2:4])
    cfg = SamplerConfig(steps=3, cfg_scale=3.0, frames_per_clip=2, seed=13)
    via_rollout = autoregress(video.frames[:2], 1, cfg, oracle, patch_size=4)
    direct = sample_clip(
        [video.frames[:2]], cfg, oracle,
        rng=np.random.default_rng(cfg.seed), patch_size=4,
    )
    assert np.array_equal(via_rollout.frames, direct)


def test_autoregress_oracle_reproduces_future_exactly():
    video, latents = oracle_setup(num_frames=12)
    oracle = FutureOracle(latents)
    cfg = SamplerConfig(steps=3, cfg_scale=3.0, frames_per_clip=2, seed=2)
    out = autoregress(video.frames[:2], 5, cfg, oracle, patch_size=4)
    assert out.num_frames == 10
    assert np.abs(out.frames - video.frames[2:12]).max() < 1e-6


def test_autoregress_sequence_lengths_grow():
    video, latents = oracle_setup(num_frames=12)
    oracle = FutureOracle(latents)
    cfg = SamplerConfig(steps=1, cfg_scale=3.0, frames_per_clip=2, seed=2)
    autoregress(video.frames[:2], 3, cfg, oracle, patch_size=4)
    # one call per flow step per clip; conditional sequence grows by one
    # clip's tokens (2 frames * (P+2) = 12 tokens) per rollout iteration
    cond_lengths = [lengths[0] for lengths in oracle.seen_lengths]
    assert cond_lengths == [24, 36, 48]


class ExplodingPredictor:
    def __init__(self, fail_at_call=2):
        self.calls = 0
        self.fail_at_call = fail_at_call

    def predict_batch(self, seqs):
        self.calls += 1
        if self.calls >= self.fail_at_call:
            raise NumericalError("non-finite activations after layer 3", layer=3)
        n = sum(len(s.noisy_patch_positions()) for s in seqs) // len(seqs)
        return [np.zeros((n, seqs[0].patch_dim), dtype=np.float32) for _ in seqs]


def test_model_failure_propagates_with_step_index():
    cfg = SamplerConfig(steps=4, cfg_scale=1.0, frames_per_clip=1, seed=0)
    with pytest.raises(NumericalError) as exc_info:
        sample_clip([], cfg, ExplodingPredictor(), geometry=(1, 4, 4), patch_size=4)
    assert "flow step 1/4" in str(exc_info.value)
    assert exc_info.value.layer == 3
