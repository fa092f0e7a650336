import json

import numpy as np
import pytest

from katana_lab import KatanaLab
from katana_lab.classify import check_protocol
from katana_lab.config import AttackConfig
from katana_lab.exceptions import ConfigError, KatanaError, ProtocolError
from katana_lab.network import accuracy
from katana_lab.results import RESULTS_HEADER, read_csv
from katana_lab.stages.defenses import loocv_training_set


@pytest.fixture
def lab(lab_yaml):
    return KatanaLab.from_file(lab_yaml)


def test_splits_are_disjoint_and_sized(lab):
    splits = lab.data.splits()
    assert (len(splits.train), len(splits.train_val), len(splits.test), len(splits.test_val)) == (27, 9, 15, 9)
    assert np.intersect1d(splits.test.indices, splits.test_val.indices).size == 0
    assert lab.data.splits() is splits


def test_evaluate_writes_table_timings_and_manifest(lab):
    table = lab.experiments.evaluate()
    out = lab.output_dir
    assert len(table.rows) == 3 * 3
    with (out / "results.csv").open() as fh:
        assert fh.readline().strip() == ",".join(RESULTS_HEADER)
    rows = read_csv(out / "results.csv")
    assert [(r["defense"], r["attack"]) for r in rows[:3]] == [("plain", "normal"), ("plain", "fgsm2"),
                                                               ("plain", "pgd2")]
    assert (out / "timings.csv").is_file()
    assert (out / "model.bin").is_file()
    assert sorted(p.name for p in (out / "katana" / "per-attack").iterdir()) == ["katana-fgsm2.bin",
                                                                                 "katana-pgd2.bin"]

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    assert manifest["config"]["seed"] == 3
    assert "model" in manifest["hashes"] and "dataset/test" in manifest["hashes"]
    assert len(manifest["rows"]) == 9


def test_plain_normal_row_is_model_accuracy(lab):
    table = lab.experiments.evaluate()
    expected = accuracy(lab.models.plain(), lab.data.get("test"))
    row = table.find("plain", "normal")
    assert row.clean_accuracy == pytest.approx(expected)
    assert row.adversarial_accuracy == row.clean_accuracy
    assert all(r.clean_accuracy == row.clean_accuracy for r in table.rows if r.defense == "plain")
    with pytest.raises(KeyError):
        table.find("ensemble", "normal")


def test_attacks_are_crafted_once_per_split(lab):
    a = lab.attacks.craft("fgsm2")
    assert lab.attacks.craft(AttackConfig.preset("fgsm2")) is a
    assert lab.attacks.craft("fgsm2", "test_val") is not a
    assert a.linf.max() <= 0.031 + 1e-6


def test_katana_fits_only_on_test_val(lab):
    model = lab.defenses.fit_katana([lab.config.attack("fgsm2")])
    tv = lab.data.get("test_val")
    np.testing.assert_array_equal(model.fit_indices, tv.indices)
    assert lab.defenses.fit_katana([lab.config.attack("fgsm2")]) is model
    model.fit_indices = np.concatenate([model.fit_indices, lab.data.get("test").indices[:1]])
    with pytest.raises(ProtocolError):
        check_protocol(model, lab.data.get("test").indices)


def test_features_slice_the_cached_stack(lab):
    test = lab.data.get("test")
    full = lab.defenses.features(test.images, test.indices)
    two = lab.defenses.features(test.images, test.indices, n=2)
    assert full.shape == (15, 4, 3)
    np.testing.assert_array_equal(two, full[:, :2])
    assert lab.cache.hits >= 1
    with pytest.raises(ConfigError):
        lab.defenses.features(test.images, test.indices, n=5)


def test_fit_modes(lab):
    attacks = lab.config.attacks
    shared = lab.defenses.fit_all("katana", "global", attacks)
    assert shared["fgsm2"] is shared["pgd2"]
    assert shared["fgsm2"].attacks == ("fgsm2", "pgd2")
    loocv = lab.defenses.fit_all("katana", "loocv", attacks)
    assert loocv["fgsm2"].attacks == ("pgd2",) and loocv["pgd2"].attacks == ("fgsm2",)
    with pytest.raises(ConfigError):
        lab.defenses.fit_all("katana", "global", attacks[:1])
    with pytest.raises(ConfigError):
        lab.defenses.fit_all("katana", "loocv", [AttackConfig.preset("pgd1"), AttackConfig.preset("pgd2")])


def test_loocv_excludes_the_whole_family():
    attacks = [AttackConfig.preset(n) for n in ("fgsm1", "fgsm2", "pgd2", "a-pgd")]
    assert [a.name for a in loocv_training_set(attacks[0], attacks)] == ["pgd2", "a-pgd"]
    assert [a.name for a in loocv_training_set(attacks[2], attacks)] == ["fgsm1", "fgsm2", "a-pgd"]


def test_transfer_needs_two_attacks(lab_yaml):
    lab = KatanaLab.from_file(lab_yaml, attacks=[AttackConfig.preset("fgsm2")])
    with pytest.raises(ConfigError):
        lab.experiments.transfer_eval("global")
    with pytest.raises(ConfigError):
        lab.experiments.transfer_eval("sideways")


def test_loocv_transfer_writes_exclusions(lab):
    table = lab.experiments.transfer_eval("loocv")
    out = lab.output_dir
    assert {r.defense for r in table.rows} == {"katana"}
    assert read_csv(out / "loocv_exclusions.csv") == [
        {"tested_attack": "fgsm2", "training_attacks": "pgd2", "excluded_attacks": "fgsm2"},
        {"tested_attack": "pgd2", "training_attacks": "fgsm2", "excluded_attacks": "pgd2"},
    ]
    assert (out / "transfer_loocv.csv").is_file()
    assert json.loads((out / "manifest_transfer_loocv.json").read_text())["status"] == "complete"


def test_ablate_n_rows(lab):
    rows = lab.experiments.ablate_n()
    assert [(r["defense"], r["n"]) for r in rows] == [("tta", 1), ("tta", 2), ("tta", 4),
                                                      ("katana", 1), ("katana", 2), ("katana", 4)]
    assert all(r["repeats"] == 2 and 0.0 <= r["mean_accuracy"] <= 100.0 for r in rows)
    assert len(read_csv(lab.output_dir / "ablate_n.csv")) == 6
    with pytest.raises(ConfigError):
        lab.experiments.ablate_n(n_values=[4, 2])


def test_ablate_katana_grid(lab):
    rows = lab.experiments.ablate_katana()
    assert len(rows) == 3 * 2 * 1
    assert {r["features"] for r in rows} == {"logits", "probs", "embeddings"}
    assert (lab.output_dir / "ablate_katana.csv").is_file()


def test_failed_evaluation_leaves_a_partial_manifest(lab, monkeypatch):
    def broken(*args, **kwargs):
        raise KatanaError("forest exploded", stage="katana")

    monkeypatch.setattr(lab.defenses, "fit_all", broken)
    with pytest.raises(KatanaError):
        lab.experiments.evaluate()
    manifest = json.loads((lab.output_dir / "manifest.json").read_text())
    assert manifest["status"] == "partial"
    assert manifest["error"]["message"] == "forest exploded"
    # plain and tta rows finished before katana failed
    assert len(manifest["rows"]) == 6
    assert not (lab.output_dir / "results.csv").exists()


def test_same_seed_gives_identical_results(lab_yaml, tmp_path):
    first = KatanaLab.from_file(lab_yaml, output_dir=str(tmp_path / "a"))
    second = KatanaLab.from_file(lab_yaml, output_dir=str(tmp_path / "b"))
    first.experiments.evaluate()
    second.experiments.evaluate()
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
    assert (tmp_path / "a" / "model.bin").read_bytes() == (tmp_path / "b" / "model.bin").read_bytes()


def test_ensemble_defense_row(lab_yaml):
    lab = KatanaLab.from_file(lab_yaml, defenses=["ensemble"])
    table = lab.experiments.evaluate()
    assert len(lab.models.ensemble()) == 2
    assert {r.defense for r in table.rows} == {"ensemble"}
