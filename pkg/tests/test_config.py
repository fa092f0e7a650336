import textwrap

import numpy as np
import pytest

from katana_lab.config import (
    AttackConfig,
    ExperimentConfig,
    ForestConfig,
    TtaConfig,
)
from katana_lab.exceptions import ConfigError


def _write(tmp_path, text):
    path = tmp_path / "lab.yaml"
    path.write_text(textwrap.dedent(text).lstrip(), encoding="utf-8")
    return path


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for var in ("KATANA_LAB_OUTPUT_DIR", "KATANA_LAB_CACHE_DIR", "KATANA_LAB_WORKERS"):
        monkeypatch.delenv(var, raising=False)


def test_load_yaml_with_presets_and_sections(tmp_path):
    path = _write(tmp_path, """
        name: unit
        seed: 11
        dataset: {classes: 3, train_per_class: 20, test_per_class: 10, size: 16}
        tta: {strength: soft, n: 8}
        attacks:
          - fgsm2
          - {preset: pgd1, iterations: 5}
          - {kind: a-fgsm, n_tta: 4, name: adaptive}
        forest: {n_trees: 7}
        defenses: [plain, tta, katana-logreg]
    """)
    cfg = ExperimentConfig.load(path)
    assert cfg.name == "unit" and cfg.seed == 11
    assert cfg.dataset.classes == 3
    assert cfg.tta.strength == "soft" and cfg.tta.n == 8 and cfg.tta.rotation == (-8.0, 8.0)
    assert [a.name for a in cfg.attacks] == ["fgsm2", "pgd1", "adaptive"]
    assert cfg.attack("pgd1").iterations == 5 and cfg.attack("pgd1").eps == 0.01
    assert cfg.attack("adaptive").n_tta == 4
    assert cfg.forest == ForestConfig(n_trees=7)
    assert cfg.split.test_val_count == 250


def test_unknown_key_names_the_field_and_line(tmp_path):
    path = _write(tmp_path, """
        seed: 1
        forest:
          n_trees: 3
          depth: 2
    """)
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.load(path)
    assert info.value.field == "forest.depth"
    assert info.value.line == 4
    assert info.value.to_record()["line"] == 4


def test_unknown_top_level_key_is_located(tmp_path):
    path = _write(tmp_path, """
        seed: 1
        colour: blue
    """)
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.load(path)
    assert info.value.field == "experiment.colour"
    assert info.value.line == 2


def test_invalid_values_are_rejected(tmp_path):
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.load(_write(tmp_path, "tta: {n: 0}\n"))
    assert info.value.field == "tta.n"
    with pytest.raises(ConfigError):
        ExperimentConfig.load(_write(tmp_path, "defenses: [plain, magic]\n"))
    with pytest.raises(ConfigError):
        ExperimentConfig.load(_write(tmp_path, "attacks: [fgsm2, fgsm2]\n"))
    with pytest.raises(ConfigError):
        ExperimentConfig.load(_write(tmp_path, "attacks: [{eps: 0.1}]\n"))


def test_broken_yaml_reports_a_line(tmp_path):
    path = _write(tmp_path, "seed: 1\ntta: {n: 4\n")
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.load(path)
    assert info.value.line is not None


def test_missing_file_names_the_path(tmp_path):
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.load(tmp_path / "absent.yaml")
    assert "absent.yaml" in str(info.value)


def test_environment_overrides(tmp_path, monkeypatch):
    path = _write(tmp_path, "output_dir: from-file\nworkers: 1\n")
    monkeypatch.setenv("KATANA_LAB_OUTPUT_DIR", str(tmp_path / "env-out"))
    monkeypatch.setenv("KATANA_LAB_WORKERS", "3")
    cfg = ExperimentConfig.load(path)
    assert cfg.output_dir == str(tmp_path / "env-out")
    assert cfg.workers == 3
    assert cfg.resolved_cache_dir == tmp_path / "env-out" / "cache"
    assert ExperimentConfig.load(path, env=False).output_dir == "from-file"


def test_bad_environment_value(tmp_path, monkeypatch):
    monkeypatch.setenv("KATANA_LAB_WORKERS", "many")
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.load(_write(tmp_path, "seed: 0\n"))
    assert info.value.field == "workers"


def test_attack_presets():
    assert AttackConfig.preset("fgsm1").eps == 0.01
    pgd2 = AttackConfig.preset("pgd2")
    assert (pgd2.eps, pgd2.alpha, pgd2.iterations, pgd2.starts_random) == (0.031, 0.003, 100, True)
    a_pgd = AttackConfig.preset("a-pgd")
    assert (a_pgd.n_tta, a_pgd.iterations, a_pgd.alpha, a_pgd.starts_random) == (25, 10, 0.007, False)
    assert AttackConfig.preset("a-fgsm").n_tta == 256
    assert AttackConfig.fgsm(0.02).name == "fgsm-0.02"
    with pytest.raises(ConfigError):
        AttackConfig.preset("cw")


def test_target_labels_wrap_around():
    cfg = AttackConfig.fgsm()
    assert cfg.target_labels(np.array([0, 3]), 4).tolist() == [1, 0]
    assert AttackConfig.fgsm(targeted=False).target_labels([2], 4) == [2]


def test_tta_presets_and_intervals():
    assert TtaConfig.hard().rotation == (-15.0, 15.0)
    assert TtaConfig.identity().flip_prob == 0.0
    with pytest.raises(ConfigError):
        TtaConfig(rotation=(5.0, -5.0))
    with pytest.raises(ConfigError):
        TtaConfig.from_dict({"strength": "medium"})
    assert TtaConfig.hard(n=8).cache_key() != TtaConfig.hard(n=16).cache_key()


def test_config_round_trips_through_to_dict():
    cfg = ExperimentConfig.desk(seed=4, attacks=[AttackConfig.preset("a-pgd")])
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
