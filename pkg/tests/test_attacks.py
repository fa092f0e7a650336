import numpy as np
import pytest

from katana_lab import attacks
from katana_lab.attacks import a_fgsm, a_pgd, fgsm, pgd, project, run_attack
from katana_lab.config import AttackConfig, TtaConfig
from katana_lab.exceptions import ConfigError

EPS = 0.03


@pytest.fixture
def batch(tiny_dataset):
    return tiny_dataset.images[::6], tiny_dataset.labels[::6]


@pytest.mark.parametrize("mode", ["clamp", "radial"])
def test_projection_is_idempotent_and_lands_in_the_ball(rng, mode):
    delta = rng.normal(scale=0.1, size=(4, 5, 5, 3)).astype(np.float32)
    once = project(delta, EPS, mode, per_sample=True)
    assert np.abs(once).max() <= EPS + 1e-7
    np.testing.assert_array_equal(project(once, EPS, mode, per_sample=True), once)


def test_radial_projection_rescales_direction():
    out = project(np.array([0.2, -0.1]), 0.1, "radial")
    np.testing.assert_allclose(out, [0.1, -0.05])
    inside = np.array([0.05, -0.02])
    np.testing.assert_array_equal(project(inside, 0.1, "radial"), inside)


def test_projection_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        project(np.zeros(3), 0.0)
    with pytest.raises(ConfigError):
        project(np.zeros(3), 0.1, "l2")


def test_fgsm_steps_against_the_target_gradient(trained_tiny_model, batch):
    x, y = batch
    result = fgsm(trained_tiny_model, x, y, eps=EPS)
    target = (y + 1) % 3
    _, grads = trained_tiny_model.loss_and_input_grad(x, target)
    expected = np.clip(x - np.float32(EPS) * np.sign(grads).astype(np.float32), 0.0, 1.0)
    np.testing.assert_allclose(result.images, expected, atol=1e-7)
    assert result.linf.max() <= EPS + 1e-6
    assert result.loss_trace.shape == (1, len(y))


def test_untargeted_fgsm_raises_the_true_label_loss(trained_tiny_model, batch):
    x, y = batch
    cfg = AttackConfig.fgsm(EPS, targeted=False)
    result = fgsm(trained_tiny_model, x, y, cfg=cfg)
    before, _ = trained_tiny_model.loss_and_input_grad(x, y)
    after, _ = trained_tiny_model.loss_and_input_grad(result.images, y)
    assert after.mean() > before.mean()


def test_fgsm_rejects_conflicting_eps_and_wrong_kind(trained_tiny_model, batch):
    x, y = batch
    with pytest.raises(ConfigError):
        fgsm(trained_tiny_model, x, y, eps=0.1, cfg=AttackConfig.fgsm(0.03))
    with pytest.raises(ConfigError):
        pgd(trained_tiny_model, x, y, AttackConfig.fgsm(0.03))


def test_targeted_pgd_lowers_target_loss_within_the_ball(trained_tiny_model, batch):
    x, y = batch
    cfg = AttackConfig.pgd(EPS, alpha=0.005, iterations=10)
    result = pgd(trained_tiny_model, x, y, cfg, seed=1)
    assert result.loss_trace.shape == (10, len(y))
    assert result.loss_trace[-1].mean() < result.loss_trace[0].mean()
    assert result.linf.max() <= EPS + 1e-6
    assert result.images.min() >= 0.0 and result.images.max() <= 1.0


def test_pgd_random_start_is_seeded(trained_tiny_model, batch):
    x, y = batch
    cfg = AttackConfig.pgd(EPS, iterations=2)
    a = pgd(trained_tiny_model, x, y, cfg, seed=3)
    b = pgd(trained_tiny_model, x, y, cfg, seed=3)
    c = pgd(trained_tiny_model, x, y, cfg, seed=4)
    np.testing.assert_array_equal(a.images, b.images)
    assert not np.array_equal(a.images, c.images)


def test_single_identity_augmentation_reduces_a_fgsm_to_fgsm(trained_tiny_model, batch):
    x, y = batch
    plain = fgsm(trained_tiny_model, x, y, eps=EPS)
    adaptive = a_fgsm(trained_tiny_model, x, y, AttackConfig.a_fgsm(EPS, n_tta=1), seed=9,
                      tta=TtaConfig.identity())
    np.testing.assert_array_equal(adaptive.images, plain.images)


@pytest.mark.parametrize("random_start", [False, True])
def test_single_identity_augmentation_reduces_a_pgd_to_pgd(trained_tiny_model, batch, random_start):
    x, y = batch
    shared = dict(alpha=0.004, iterations=3, random_start=random_start)
    plain = pgd(trained_tiny_model, x, y, AttackConfig.pgd(EPS, **shared), seed=2)
    adaptive = a_pgd(trained_tiny_model, x, y, AttackConfig.a_pgd(EPS, n_tta=1, **shared), seed=2,
                     tta=TtaConfig.identity())
    np.testing.assert_array_equal(adaptive.images, plain.images)
    np.testing.assert_array_equal(adaptive.loss_trace, plain.loss_trace)


def test_a_fgsm_step_is_bounded_by_eps(trained_tiny_model, batch, small_tta):
    x, y = batch
    result = a_fgsm(trained_tiny_model, x, y, AttackConfig.a_fgsm(EPS, n_tta=4), seed=0, tta=small_tta)
    assert result.linf.max() <= EPS + 1e-6


def test_attack_tta_overrides_the_defender_tta(trained_tiny_model, batch):
    x, y = batch
    cfg = AttackConfig.a_fgsm(EPS, n_tta=1, tta=TtaConfig.identity())
    pinned = a_fgsm(trained_tiny_model, x, y, cfg, seed=9, tta=TtaConfig.hard())
    np.testing.assert_array_equal(pinned.images, fgsm(trained_tiny_model, x, y, eps=EPS).images)


def test_run_attack_is_chunk_invariant(monkeypatch, trained_tiny_model, tiny_dataset, small_tta):
    x, y = tiny_dataset.images[:6], tiny_dataset.labels[:6]
    keys = np.arange(100, 106)
    cfg = AttackConfig.a_pgd(EPS, n_tta=2, iterations=2)
    whole = run_attack(trained_tiny_model, x, y, cfg, seed=5, tta=small_tta, keys=keys)
    monkeypatch.setattr(attacks, "MAX_ROWS", 4)
    seen = []
    chunked = run_attack(trained_tiny_model, x, y, cfg, seed=5, tta=small_tta, keys=keys, progress=seen.append)
    assert seen == [2, 4, 6]
    # randomness follows keys, so only float rounding of batched matmuls may differ
    assert np.mean(np.isclose(chunked.images, whole.images, atol=1e-6)) > 0.99
    np.testing.assert_allclose(chunked.loss_trace, whole.loss_trace, rtol=1e-3)


def test_run_attack_on_no_images(trained_tiny_model, tiny_dataset):
    result = run_attack(trained_tiny_model, tiny_dataset.images[:0], tiny_dataset.labels[:0],
                        AttackConfig.pgd(EPS, iterations=2))
    assert len(result) == 0
    assert result.loss_trace.shape == (2, 0)


@pytest.mark.slow
def test_random_attack_configs_stay_in_bounds(trained_tiny_model, tiny_dataset):
    # 200 configs x 50 images = 10_000 attacked images
    rng = np.random.default_rng(0)
    attacked = 0
    for trial in range(200):
        kind = rng.choice(["fgsm", "pgd", "a-fgsm", "a-pgd"])
        eps = float(rng.uniform(0.001, 0.1))
        overrides = {"projection": str(rng.choice(["clamp", "radial"])), "targeted": bool(rng.integers(2))}
        if kind in ("pgd", "a-pgd"):
            overrides.update(iterations=int(rng.integers(1, 4)), alpha=float(rng.uniform(0.001, 0.05)))
        if kind.startswith("a-"):
            overrides["n_tta"] = int(rng.integers(1, 4))
        cfg = AttackConfig.from_dict({"kind": str(kind), "eps": eps, **overrides})
        pick = rng.choice(len(tiny_dataset), size=50)
        x = tiny_dataset.images[pick]
        result = run_attack(trained_tiny_model, x, tiny_dataset.labels[pick], cfg, seed=trial,
                            tta=TtaConfig.hard(), keys=np.arange(trial * 50, (trial + 1) * 50))
        linf = np.abs(result.images.astype(np.float64) - x).reshape(50, -1).max(axis=1)
        assert linf.max() <= eps + 1e-6, cfg.name
        assert result.linf.max() <= eps + 1e-6, cfg.name
        assert result.images.min() >= 0.0 and result.images.max() <= 1.0
        attacked += len(result)
    assert attacked == 10_000
