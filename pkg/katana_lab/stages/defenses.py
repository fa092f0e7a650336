"""
Defense stage: TTA feature stacks, KATANA fits and per-defense predictions.

Feature stacks always come from the plain model and go through the logits
cache at the configured N; smaller N values slice the first rows, so the
first n augmentations of an image are the same for every n. KATANA heads
are fitted on test-val only and checked against the test split before use.
"""

from dataclasses import replace
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from ..cache import cache_logits
from ..classify import (
    KatanaLayout,
    KatanaModel,
    check_protocol,
    ensemble_predict,
    katana_fit,
    save_katana,
    tta_predict_batch,
)
from ..config import AttackConfig, ForestConfig, LogRegConfig, TtaConfig
from ..exceptions import ConfigError
from ..seeding import derive_seed

if TYPE_CHECKING:
    from ..lab import KatanaLab

log = structlog.get_logger(__name__)

KATANA_DEFENSES = ("katana", "katana-logreg")


def percent_correct(predicted: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.asarray(predicted) == np.asarray(labels)) * 100.0)


class DefenseStage:
    def __init__(self, lab: "KatanaLab"):
        self._lab = lab
        self._fits: Dict[Tuple, KatanaModel] = {}

    def features(self, images: np.ndarray, keys: Optional[np.ndarray], kind: str = "logits",
                 tta: Optional[TtaConfig] = None, seed: Optional[int] = None,
                 n: Optional[int] = None) -> np.ndarray:
        """(M, n, width) TTA features of ``images`` under the plain model."""
        cfg = self._lab.config
        tta = tta or self._lab.tta
        seed = derive_seed(cfg.seed, "defense-tta") if seed is None else seed
        if n is not None and not 1 <= n <= tta.n:
            raise ConfigError(f"n={n} outside [1, {tta.n}]", field="tta.n")
        with self._lab.progress(len(images), f"tta {kind}") as update:
            stack = cache_logits(self._lab.models.plain(), images, tta, seed, self._lab.cache, keys=keys,
                                 kind=kind, workers=cfg.workers, progress=update)
        return stack if n is None else stack[:, :n]

    def head_config(self, defense: str, tag: str) -> Union[ForestConfig, LogRegConfig]:
        cfg = self._lab.config
        seed = derive_seed(cfg.seed, "head", defense, tag)
        if defense == "katana-logreg":
            return replace(cfg.logreg, seed=seed)
        return replace(cfg.forest, seed=seed, workers=cfg.workers)

    def fit_katana(self, attacks: Sequence[AttackConfig], defense: str = "katana",
                   tta: Optional[TtaConfig] = None, kind: Optional[str] = None, seed: Optional[int] = None,
                   n: Optional[int] = None) -> KatanaModel:
        """
        Fit one head on clean test-val features plus the test-val features of
        every attack in ``attacks``. Memoized per argument set.
        """
        if defense not in KATANA_DEFENSES:
            raise ConfigError(f"{defense!r} is not a KATANA defense", field="defenses")
        if not attacks:
            raise ConfigError("KATANA needs at least one attack to fit on", field="attacks")
        cfg = self._lab.config
        tta = tta or self._lab.tta
        kind = kind or cfg.katana.features
        names = tuple(a.name for a in attacks)
        memo = (defense, names, kind, tta.cache_key(), seed, n)
        if memo in self._fits:
            return self._fits[memo]

        tv = self._lab.data.get("test_val")
        normal = self.features(tv.images, tv.indices, kind, tta, seed, n)
        adversarial = [
            self.features(self._lab.attacks.craft(a, "test_val").images, tv.indices, kind, tta, seed, n)
            for a in attacks
        ]
        layout = KatanaLayout(n=normal.shape[1], width=normal.shape[2], kind=kind, ordering=cfg.katana.layout)
        tag = "+".join(names) + f"/{kind}/{tta.cache_key()}/{n}"
        model = katana_fit(normal, adversarial[0], tv.labels, self.head_config(defense, tag), layout,
                           extra_adv=adversarial[1:], attacks=names, indices=tv.indices,
                           num_classes=tv.num_classes)
        check_protocol(model, self._lab.data.get("test").indices)
        self._fits[memo] = model
        return model

    def fit_all(self, defense: str, mode: str, attacks: Sequence[AttackConfig]) -> Dict[str, KatanaModel]:
        """The KATANA model each attack is evaluated with under ``mode``."""
        if mode == "per-attack":
            return {a.name: self.fit_katana([a], defense) for a in attacks}
        if len(attacks) < 2:
            raise ConfigError(f"fit mode '{mode}' needs at least two attacks, got {len(attacks)}",
                              field="katana.fit_mode")
        if mode == "global":
            shared = self.fit_katana(list(attacks), defense)
            return {a.name: shared for a in attacks}
        if mode == "loocv":
            fits = {}
            for a in attacks:
                others = loocv_training_set(a, attacks)
                if not others:
                    raise ConfigError(f"no attack outside family '{a.family}' to train on for '{a.name}'",
                                      field="attacks")
                fits[a.name] = self.fit_katana(others, defense)
            return fits
        raise ConfigError(f"unknown fit mode {mode!r}", field="katana.fit_mode")

    def predict(self, defense: str, images: np.ndarray, keys: Optional[np.ndarray],
                katana: Optional[KatanaModel] = None) -> np.ndarray:
        models = self._lab.models
        if defense == "plain":
            return models.plain().predict(images)
        if defense == "ensemble":
            return ensemble_predict(models.ensemble(), images)
        if defense == "tta":
            return tta_predict_batch(self.features(images, keys, "logits"), mode="logits")
        if defense in KATANA_DEFENSES:
            if katana is None:
                raise ConfigError(f"defense '{defense}' needs a fitted KATANA model", field="defenses")
            stack = self.features(images, keys, katana.layout.kind, n=katana.layout.n)
            return katana.predict_batch(stack)
        raise ConfigError(f"unknown defense {defense!r}", field="defenses")

    def save_fits(self, defense: str, mode: str, fits: Dict[str, KatanaModel], root: Path) -> Dict[str, str]:
        """Write each distinct model once; returns attack name -> artifact path."""
        written: Dict[int, str] = {}
        paths = {}
        for attack, model in fits.items():
            if id(model) not in written:
                path = root / "katana" / mode / f"{defense}-{'+'.join(model.attacks)}.bin"
                path.parent.mkdir(parents=True, exist_ok=True)
                save_katana(model, path)
                written[id(model)] = str(path)
            paths[attack] = written[id(model)]
        log.info("katana_saved", defense=defense, mode=mode, files=len(written))
        return paths


def loocv_training_set(held_out: AttackConfig, attacks: Sequence[AttackConfig]) -> List[AttackConfig]:
    """Every attack outside the held-out attack's family."""
    return [a for a in attacks if a.family != held_out.family]
