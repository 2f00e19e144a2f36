import numpy as np
import pytest

from uepo import diffusion, divergence, nets
from uepo.datasets import Trajectory, TrajectoryDataset
from uepo.errors import ConfigError, EmptyBatchError, ShapeError


def tiny_policy(rng, T=3, d_a=1, d_s=1, k=4, hidden=(8,)):
    sched = diffusion.make_linear_schedule(k, 1e-4, 0.2)
    return diffusion.make_policy(T, d_a, d_s, hidden, rng, schedule=sched)


def chain_dataset(rng, lengths, d_s=2, d_a=1):
    """Trajectories with consistent state chains and recognizable actions."""
    trajs = []
    for li, length in enumerate(lengths):
        states = rng.standard_normal((length + 1, d_s))
        actions = np.full((length, d_a), float(li)) + 0.01 * np.arange(length)[:, None]
        trajs.append(Trajectory(states[:-1], actions, states[1:], None, seed=li))
    return TrajectoryDataset(trajs, {"env": "test", "d_s": d_s, "d_a": d_a})


def test_linear_schedule_oracle():
    sched = diffusion.make_linear_schedule(5, 1e-4, 0.02)
    assert sched.k == 5
    assert np.allclose(sched.beta, np.linspace(1e-4, 0.02, 5), atol=1e-15)
    assert np.array_equal(sched.alpha, 1.0 - sched.beta)
    # cumulative product recomputed with an explicit loop
    prod = 1.0
    for t in range(5):
        prod *= 1.0 - sched.beta[t]
        assert sched.alpha_bar[t] == pytest.approx(prod, rel=1e-14)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        diffusion.make_linear_schedule(0)
    with pytest.raises(ConfigError):
        diffusion.make_linear_schedule(5, 0.02, 1e-4)
    with pytest.raises(ConfigError):
        diffusion.make_linear_schedule(5, 0.0, 0.02)
    with pytest.raises(ConfigError):
        diffusion.make_linear_schedule(5, 1e-4, 1.0)


def test_q_sample_formula():
    rng = np.random.default_rng(0)
    sched = diffusion.make_linear_schedule(6, 1e-4, 0.2)
    a0 = rng.standard_normal((4, 2))
    eps = rng.standard_normal((4, 2))
    for t in range(6):
        ab = sched.alpha_bar[t]
        want = np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * eps
        assert np.allclose(diffusion.q_sample(a0, t, eps, sched), want, atol=1e-15)


def test_predict_eps_input_layout():
    rng = np.random.default_rng(1)
    policy = tiny_policy(rng, T=3, d_a=2, d_s=2)
    a_t = rng.standard_normal((3, 2))
    s = rng.standard_normal((3, 2))
    t = 2
    emb = nets.time_embedding(t, policy.schedule.k, policy.emb_dim)
    x = np.concatenate([a_t.ravel(), s.ravel(), emb])
    want = nets.forward(policy.denoiser, x).reshape(3, 2)
    assert np.allclose(diffusion.predict_eps(policy, a_t, s, t), want, atol=1e-14)


def test_reverse_mean_formula():
    rng = np.random.default_rng(2)
    policy = tiny_policy(rng)
    a_t = rng.standard_normal((3, 1))
    s = rng.standard_normal((3, 1))
    for t in range(policy.schedule.k):
        eps = diffusion.predict_eps(policy, a_t, s, t)
        beta = policy.schedule.beta[t]
        want = (a_t - beta / np.sqrt(1.0 - policy.schedule.alpha_bar[t]) * eps)
        want /= np.sqrt(policy.schedule.alpha[t])
        assert np.allclose(diffusion.reverse_mean(policy, a_t, s, t), want,
                           atol=1e-13)


def test_reverse_step_noise_injection():
    rng = np.random.default_rng(3)
    policy = tiny_policy(rng)
    a_t = rng.standard_normal((3, 1))
    s = rng.standard_normal((3, 1))
    mean = diffusion.reverse_mean(policy, a_t, s, 2)
    z = np.random.default_rng(11).standard_normal((3, 1))
    want = mean + np.sqrt(policy.schedule.beta[2]) * z
    got = diffusion.reverse_step(policy, a_t, s, 2, np.random.default_rng(11))
    assert np.allclose(got, want, atol=1e-14)
    # the last step is the posterior mean with no noise draw
    got0 = diffusion.reverse_step(policy, a_t, s, 0, np.random.default_rng(11))
    assert np.array_equal(got0, diffusion.reverse_mean(policy, a_t, s, 0))


def test_denoising_loss_gradient_matches_fd():
    rng = np.random.default_rng(4)
    policy = tiny_policy(rng, T=3, d_a=1, d_s=1, k=4, hidden=(6,))
    states = rng.standard_normal((5, 3, 1))
    actions = rng.standard_normal((5, 3, 1))
    base = nets.get_params(policy.denoiser)
    _, analytic = diffusion.denoising_loss(policy, states, actions,
                                           np.random.default_rng(99))

    def loss_at(p):
        nets.set_params(policy.denoiser, p)
        val, _ = diffusion.denoising_loss(policy, states, actions,
                                          np.random.default_rng(99))
        return val

    h = 1e-6
    numeric = np.zeros_like(base)
    for i in range(base.size):
        p = base.copy()
        p[i] += h
        up = loss_at(p)
        p[i] -= 2 * h
        numeric[i] = (up - loss_at(p)) / (2 * h)
    nets.set_params(policy.denoiser, base)
    denom = np.maximum(np.abs(numeric), 1e-8)
    assert np.max(np.abs(analytic - numeric) / denom) < 1e-5


def test_train_denoiser_reduces_loss():
    rng = np.random.default_rng(5)
    policy = tiny_policy(rng, T=3, d_a=1, d_s=1, hidden=(16,))
    states = np.zeros((64, 3, 1))
    actions = np.full((64, 3, 1), 0.7)
    losses = diffusion.train_denoiser(policy, states, actions, 200, 32, 1e-2,
                                      np.random.default_rng(6))
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_sample_determinism_and_clip():
    rng = np.random.default_rng(7)
    policy = tiny_policy(rng, T=4, d_a=2, d_s=1)
    window = diffusion.state_window(np.zeros(1), 4)
    a1 = diffusion.sample(policy, window, seed=42)
    a2 = diffusion.sample(policy, window, seed=42)
    assert np.array_equal(a1, a2)
    assert a1.shape == (4, 2)
    assert np.all(a1 >= policy.action_low) and np.all(a1 <= policy.action_high)
    a3 = diffusion.sample(policy, window, seed=43)
    assert not np.array_equal(a1, a3)


def test_state_window_tiles_anchor():
    w = diffusion.state_window(np.array([1.0, 2.0]), 3)
    assert w.shape == (3, 2)
    assert np.array_equal(w, np.array([[1.0, 2.0]] * 3))


def test_prefix_windows_anchor_at_start():
    rng = np.random.default_rng(8)
    ds = chain_dataset(rng, [5, 3, 4])
    S, A = diffusion.prefix_windows(ds, T=4)
    # only trajectories 0 (len 5) and 2 (len 4) are long enough
    assert S.shape == (2, 4, 2) and A.shape == (2, 4, 1)
    assert np.array_equal(S[0], np.tile(ds.trajectories[0].states[0], (4, 1)))
    assert np.array_equal(A[0], ds.trajectories[0].actions[:4])
    assert np.array_equal(A[1], ds.trajectories[2].actions[:4])


def test_sliding_windows_every_stride():
    rng = np.random.default_rng(9)
    ds = chain_dataset(rng, [6])
    S, A = diffusion.sliding_windows(ds, T=4, stride=2)
    # anchors 0 and 2 fit a length-4 window in a length-6 trajectory
    assert S.shape == (2, 4, 2)
    tr = ds.trajectories[0]
    assert np.array_equal(S[1], np.tile(tr.states[2], (4, 1)))
    assert np.array_equal(A[1], tr.actions[2:6])


def test_windows_validation():
    rng = np.random.default_rng(10)
    ds = chain_dataset(rng, [3])
    with pytest.raises(EmptyBatchError):
        diffusion.prefix_windows(ds, T=10)
    with pytest.raises(ConfigError):
        diffusion.sliding_windows(ds, T=3, stride=0)


def test_derive_seed_deterministic_and_distinct():
    seeds = [diffusion.derive_seed(17, i) for i in range(8)]
    again = [diffusion.derive_seed(17, i) for i in range(8)]
    assert seeds == again
    assert len(set(seeds)) == 8
    assert diffusion.derive_seed(18, 0) != seeds[0]


def test_make_ensemble_spec_validation():
    with pytest.raises(ConfigError):
        diffusion.make_ensemble_spec(0, 5)
    spec = diffusion.make_ensemble_spec(3, 5)
    assert len(spec.seeds) == 3


def test_ensemble_unguided_matches_sample_bitwise():
    rng = np.random.default_rng(11)
    policy = tiny_policy(rng, T=4, d_a=1, d_s=1)
    window = diffusion.state_window(np.zeros(1), 4)
    cfg = divergence.DivergenceConfig(tau=0.5, eta=0.0, guided_steps=10)
    spec = diffusion.make_ensemble_spec(3, 21, cfg)
    outs = diffusion.sample_ensemble(policy, window, spec)
    for seed, out in zip(spec.seeds, outs):
        assert np.array_equal(out, diffusion.sample(policy, window, seed))


def test_ensemble_guidance_changes_later_members():
    rng = np.random.default_rng(12)
    policy = tiny_policy(rng, T=4, d_a=1, d_s=1)
    window = diffusion.state_window(np.zeros(1), 4)
    # an enormous tau keeps the gate open at every guided step
    cfg = divergence.DivergenceConfig(tau=1e6, eta=0.5, guided_steps=4)
    spec = diffusion.make_ensemble_spec(3, 21, cfg)
    guided = diffusion.sample_ensemble(policy, window, spec)
    assert np.array_equal(guided[0], diffusion.sample(policy, window, spec.seeds[0]))
    for i in (1, 2):
        plain = diffusion.sample(policy, window, spec.seeds[i])
        assert not np.array_equal(guided[i], plain)


def test_policy_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    policy = tiny_policy(rng, T=3, d_a=2, d_s=2)
    path = str(tmp_path / "policy.bin")
    diffusion.save_policy(policy, path)
    back = diffusion.load_policy(path)
    assert np.array_equal(nets.get_params(back.denoiser),
                          nets.get_params(policy.denoiser))
    assert np.array_equal(back.schedule.beta, policy.schedule.beta)
    assert (back.T, back.d_a, back.d_s) == (policy.T, policy.d_a, policy.d_s)
    window = diffusion.state_window(np.zeros(2), 3)
    assert np.array_equal(diffusion.sample(back, window, 5),
                          diffusion.sample(policy, window, 5))


def test_policy_checkpoint_rejects_truncation(tmp_path):
    rng = np.random.default_rng(14)
    policy = tiny_policy(rng)
    path = tmp_path / "policy.bin"
    diffusion.save_policy(policy, str(path))
    path.write_bytes(path.read_bytes() + b"\x00\x00")
    with pytest.raises(ConfigError):
        diffusion.load_policy(str(path))
