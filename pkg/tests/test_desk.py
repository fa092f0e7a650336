"""Desk-scale runs of configs/desk.yaml. Minutes each; selected with ``pytest -m slow``."""

from pathlib import Path

import pytest

from katana_lab import KatanaLab
from katana_lab.attacks import run_attack
from katana_lab.config import AttackConfig

pytestmark = pytest.mark.slow

DESK = Path(__file__).resolve().parent.parent / "configs" / "desk.yaml"


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    lab = KatanaLab.from_file(DESK, output_dir=str(out))
    return lab, lab.experiments.evaluate()


def test_plain_model_is_accurate_and_breaks_under_pgd(desk):
    _, table = desk
    assert table.find("plain", "normal").clean_accuracy >= 95.0
    assert table.find("plain", "pgd2").adversarial_accuracy < 10.0


def test_tta_recovers_accuracy_under_pgd(desk):
    _, table = desk
    plain = table.find("plain", "pgd2").adversarial_accuracy
    assert table.find("tta", "pgd2").adversarial_accuracy >= plain + 40.0


def test_katana_keeps_clean_accuracy_and_matches_tta(desk):
    _, table = desk
    assert abs(table.find("katana", "normal").clean_accuracy - table.find("plain", "normal").clean_accuracy) <= 3.0
    assert (table.find("katana", "pgd2").adversarial_accuracy
            >= table.find("tta", "pgd2").adversarial_accuracy - 2.0)


def test_adaptive_pgd_beats_the_randomized_defenses(desk):
    _, table = desk
    for defense in ("tta", "katana"):
        vanilla = table.find(defense, "pgd2").adversarial_accuracy
        adaptive = table.find(defense, "a-pgd").adversarial_accuracy
        assert vanilla - adaptive >= 15.0, defense


def test_untargeted_pgd_loss_exceeds_fgsm_loss(desk):
    lab, _ = desk
    test = lab.data.get("test")
    model = lab.models.plain()
    x, y = test.images[:100], test.labels[:100]
    losses = {}
    for cfg in (AttackConfig.fgsm(0.031, targeted=False), AttackConfig.pgd(0.031, targeted=False)):
        adv = run_attack(model, x, y, cfg, seed=0)
        losses[cfg.kind], _ = model.loss_and_input_grad(adv.images, y)
    assert losses["pgd"].mean() >= losses["fgsm"].mean()


def test_global_and_loocv_fits_transfer(desk):
    lab, _ = desk
    names = ("fgsm2", "pgd2")
    attacks = [lab.config.attack(n) for n in names]
    per_attack = lab.defenses.fit_all("katana", "per-attack", attacks)
    test = lab.data.get("test")
    for mode in ("global", "loocv"):
        fits = lab.defenses.fit_all("katana", mode, attacks)
        for name in names:
            adv = lab.attacks.craft(name)
            ours = (lab.defenses.predict("katana", adv.images, test.indices, fits[name]) == test.labels).mean()
            base = (lab.defenses.predict("katana", adv.images, test.indices, per_attack[name]) == test.labels).mean()
            assert abs(ours - base) * 100 <= 5.0, (mode, name)


def test_rerun_is_byte_identical(desk, tmp_path):
    lab, _ = desk
    again = KatanaLab.from_file(DESK, output_dir=str(tmp_path))
    again.experiments.evaluate()
    assert (tmp_path / "results.csv").read_bytes() == (lab.output_dir / "results.csv").read_bytes()
