"""
Experiment stage: the evaluation table, the two ablations and the
transferability runs.

Every adversarial set is crafted against the plain model; the ensemble is
evaluated on those same images, so its members are never attacked
directly. KATANA clean accuracy is the mean and population std over the
distinct fits a defense used.
"""

import time
from dataclasses import replace
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence

import numpy as np
import structlog

from ..classify import tta_predict_batch
from ..config import FEATURE_KINDS, AttackConfig, TtaConfig
from ..exceptions import ConfigError, KatanaError
from ..formats import file_hash
from ..results import ResultRow, ResultsTable, write_csv, write_manifest
from ..seeding import derive_seed
from .defenses import KATANA_DEFENSES, loocv_training_set, percent_correct

if TYPE_CHECKING:
    from ..classify import KatanaModel
    from ..lab import KatanaLab

log = structlog.get_logger(__name__)

ABLATE_N_HEADER = ("attack", "defense", "n", "mean_accuracy", "std_accuracy", "repeats")
ABLATE_KATANA_HEADER = ("features", "transforms", "sigma_max", "clean_accuracy", "adversarial_accuracy")
EXCLUSIONS_HEADER = ("tested_attack", "training_attacks", "excluded_attacks")


class ExperimentStage:
    def __init__(self, lab: "KatanaLab"):
        self._lab = lab

    # -- evaluation -----------------------------------------------------------

    def evaluate(self, out_dir: Optional[Path] = None) -> ResultsTable:
        """
        One row per (defense, attack) plus a ``normal`` row per defense.
        Writes results.csv, timings.csv and manifest.json; on failure the
        manifest carries the rows done so far and the error before re-raising.
        """
        cfg = self._lab.config
        out = Path(out_dir) if out_dir else self._lab.output_dir
        table = ResultsTable()
        try:
            self._evaluate_into(table, cfg.defenses, cfg.katana.fit_mode, out)
        except KatanaError as exc:
            write_manifest(out / "manifest.json", self._manifest(table), status="partial", error=exc)
            log.error("evaluate_failed", stage=exc.stage, error=str(exc), rows_done=len(table.rows))
            raise
        table.to_csv(out / "results.csv")
        table.timings_csv(out / "timings.csv")
        write_manifest(out / "manifest.json", self._manifest(table))
        log.info("evaluate_done", rows=len(table.rows), out=str(out))
        return table

    def _evaluate_into(self, table: ResultsTable, defenses: Sequence[str], mode: str, out: Path) -> None:
        cfg = self._lab.config
        splits = self._lab.data.splits()
        test = splits.test
        defense_stage = self._lab.defenses
        attacks = list(cfg.attacks)
        if not cfg.model_path:
            table.artifacts["model"] = str(self._lab.models.save_plain(out / "model.bin"))

        for defense in defenses:
            started = time.perf_counter()
            fits: Dict[str, "KatanaModel"] = {}
            if defense in KATANA_DEFENSES:
                fits = defense_stage.fit_all(defense, mode, attacks)
                for attack, path in defense_stage.save_fits(defense, mode, fits, out).items():
                    table.artifacts[f"{defense}/{mode}/{attack}"] = path
                distinct = list({id(m): m for m in fits.values()}.values())
                clean = [percent_correct(defense_stage.predict(defense, test.images, test.indices, m), test.labels)
                         for m in distinct]
                clean_mean, clean_std = float(np.mean(clean)), float(np.std(clean))
            else:
                clean_mean = percent_correct(defense_stage.predict(defense, test.images, test.indices), test.labels)
                clean_std = 0.0
            table.add(self._row(defense, "normal", clean_mean, clean_std, clean_mean, time.perf_counter() - started))

            for attack in attacks:
                started = time.perf_counter()
                adv = self._lab.attacks.craft(attack, "test")
                predicted = defense_stage.predict(defense, adv.images, test.indices, fits.get(attack.name))
                table.add(self._row(defense, attack.name, clean_mean, clean_std,
                                    percent_correct(predicted, test.labels), time.perf_counter() - started))
                log.info("row_done", defense=defense, attack=attack.name,
                         adversarial_accuracy=table.rows[-1].adversarial_accuracy)

    def _row(self, defense: str, attack: str, clean: float, clean_std: float, adversarial: float,
             seconds: float) -> ResultRow:
        cfg = self._lab.config
        return ResultRow(cfg.dataset.name, defense, attack, clean, clean_std, adversarial, cfg.seed, seconds)

    def _manifest(self, table: ResultsTable) -> Dict[str, Any]:
        from .. import __version__

        cfg = self._lab.config
        hashes: Dict[str, str] = {}
        if cfg.model_path:
            hashes["model"] = file_hash(cfg.model_path)
        for name, path in table.artifacts.items():
            if Path(path).is_file():
                hashes[name] = file_hash(path)
        splits = self._lab.data.splits()
        for name in ("train", "train_val", "test", "test_val"):
            hashes[f"dataset/{name}"] = splits.get(name).content_id()
        hashes.update({f"cache/{k}": v for k, v in self._lab.cache.entry_hashes().items()})
        return {
            "version": __version__,
            "config": cfg.to_dict(),
            "seeds": {"experiment": cfg.seed, "dataset": cfg.dataset.seed, "split": cfg.split.seed,
                      "train": cfg.train.seed, "forest": cfg.forest.seed},
            "hashes": hashes,
            "rows": table.to_records(),
            "cache": {"hits": self._lab.cache.hits, "misses": self._lab.cache.misses},
        }

    # -- ablations ------------------------------------------------------------

    def _ablation_attack(self) -> AttackConfig:
        cfg = self._lab.config
        if cfg.ablation.attack:
            return cfg.attack(cfg.ablation.attack)
        if not cfg.attacks:
            raise ConfigError("ablations need at least one configured attack", field="attacks")
        return cfg.attacks[0]

    def ablate_n(self, n_values: Optional[Sequence[int]] = None, out_dir: Optional[Path] = None) -> List[Dict[str, Any]]:
        """
        Adversarial accuracy per N, mean and population std over repeats.
        Each repeat draws N_max augmentations per image once and evaluates
        every n on the first n of them.
        """
        cfg = self._lab.config
        n_values = tuple(n_values or cfg.ablation.n_values)
        if list(n_values) != sorted(n_values) or n_values[0] < 1:
            raise ConfigError("n_values must be positive and sorted ascending", field="ablation.n_values")
        attack = self._ablation_attack()
        tta = replace(self._lab.tta, n=n_values[-1])
        test = self._lab.data.get("test")
        adv = self._lab.attacks.craft(attack, "test")
        defenses = [d for d in ("tta", "katana", "katana-logreg") if d in cfg.defenses] or ["tta"]
        defense_stage = self._lab.defenses

        scores = {(d, n): [] for d in defenses for n in n_values}
        for r in range(cfg.ablation.repeats):
            seed = derive_seed(cfg.seed, "ablate-n", r)
            for n in n_values:
                for defense in defenses:
                    if defense == "tta":
                        stack = defense_stage.features(adv.images, test.indices, "logits", tta, seed, n)
                        predicted = tta_predict_batch(stack, mode="logits")
                    else:
                        model = defense_stage.fit_katana([attack], defense, tta, seed=seed, n=n)
                        stack = defense_stage.features(adv.images, test.indices, model.layout.kind, tta, seed, n)
                        predicted = model.predict_batch(stack)
                    scores[(defense, n)].append(percent_correct(predicted, test.labels))
            log.info("ablate_n_repeat", repeat=r, attack=attack.name)

        rows = [
            {"attack": attack.name, "defense": d, "n": n, "mean_accuracy": float(np.mean(scores[(d, n)])),
             "std_accuracy": float(np.std(scores[(d, n)])), "repeats": cfg.ablation.repeats}
            for d in defenses for n in n_values
        ]
        out = Path(out_dir) if out_dir else self._lab.output_dir
        write_csv(out / "ablate_n.csv", ABLATE_N_HEADER,
                  ([r["attack"], r["defense"], r["n"], f"{r['mean_accuracy']:.4f}", f"{r['std_accuracy']:.4f}",
                    r["repeats"]] for r in rows))
        return rows

    def ablate_katana(self, out_dir: Optional[Path] = None) -> List[Dict[str, Any]]:
        """Feature kind x transform strength x noise ceiling grid for the forest head."""
        cfg = self._lab.config
        attack = self._ablation_attack()
        base = self._lab.tta
        test = self._lab.data.get("test")
        adv = self._lab.attacks.craft(attack, "test")
        defense_stage = self._lab.defenses
        presets = {"soft": TtaConfig.soft, "hard": TtaConfig.hard}

        rows = []
        for kind in FEATURE_KINDS:
            for strength, preset in presets.items():
                for sigma in cfg.ablation.sigma_max_values:
                    tta = preset(n=base.n, noise_sigma_max=sigma, mirror_enabled=base.mirror_enabled,
                                 translation=base.translation, pad_to=base.pad_to)
                    model = defense_stage.fit_katana([attack], "katana", tta, kind=kind)
                    clean = model.predict_batch(defense_stage.features(test.images, test.indices, kind, tta))
                    attacked = model.predict_batch(defense_stage.features(adv.images, test.indices, kind, tta))
                    rows.append({"features": kind, "transforms": strength, "sigma_max": sigma,
                                 "clean_accuracy": percent_correct(clean, test.labels),
                                 "adversarial_accuracy": percent_correct(attacked, test.labels)})
                    log.info("ablate_katana_cell", **rows[-1])
        out = Path(out_dir) if out_dir else self._lab.output_dir
        write_csv(out / "ablate_katana.csv", ABLATE_KATANA_HEADER,
                  ([r["features"], r["transforms"], f"{r['sigma_max']:g}", f"{r['clean_accuracy']:.4f}",
                    f"{r['adversarial_accuracy']:.4f}"] for r in rows))
        return rows

    # -- transferability ------------------------------------------------------

    def transfer_eval(self, mode: str, out_dir: Optional[Path] = None) -> ResultsTable:
        cfg = self._lab.config
        if mode not in ("per-attack", "global", "loocv"):
            raise ConfigError(f"unknown fit mode {mode!r}", field="katana.fit_mode")
        if mode != "per-attack" and len(cfg.attacks) < 2:
            raise ConfigError(f"fit mode '{mode}' needs at least two attacks, got {len(cfg.attacks)}",
                              field="attacks")
        out = Path(out_dir) if out_dir else self._lab.output_dir
        defenses = [d for d in cfg.defenses if d in KATANA_DEFENSES] or ["katana"]
        table = ResultsTable()
        try:
            self._evaluate_into(table, defenses, mode, out)
        except KatanaError as exc:
            write_manifest(out / f"manifest_transfer_{mode}.json", self._manifest(table), status="partial",
                           error=exc)
            raise
        table.to_csv(out / f"transfer_{mode}.csv")
        if mode == "loocv":
            write_csv(out / "loocv_exclusions.csv", EXCLUSIONS_HEADER, self.exclusion_table())
        write_manifest(out / f"manifest_transfer_{mode}.json", self._manifest(table))
        return table

    def exclusion_table(self) -> List[List[str]]:
        attacks = self._lab.config.attacks
        rows = []
        for a in attacks:
            used = {b.name for b in loocv_training_set(a, attacks)}
            rows.append([a.name, ";".join(b.name for b in attacks if b.name in used),
                         ";".join(b.name for b in attacks if b.name not in used)])
        return rows

