from typing import TYPE_CHECKING, Dict, Tuple, Union

from ..attacks import AdversarialResult, run_attack
from ..config import AttackConfig
from ..seeding import derive_seed

if TYPE_CHECKING:
    from ..lab import KatanaLab


class AttackStage:
    """Adversarial versions of a split, crafted once per (attack, split) against the plain model."""

    def __init__(self, lab: "KatanaLab"):
        self._lab = lab
        self._crafted: Dict[Tuple[str, str], AdversarialResult] = {}

    def resolve(self, attack: Union[str, AttackConfig]) -> AttackConfig:
        return self._lab.config.attack(attack) if isinstance(attack, str) else attack

    def craft(self, attack: Union[str, AttackConfig], split: str = "test") -> AdversarialResult:
        cfg = self.resolve(attack)
        memo = (cfg.name, split)
        if memo not in self._crafted:
            ds = self._lab.data.get(split)
            seed = derive_seed(self._lab.config.seed, "attack", cfg.name, split)
            with self._lab.progress(len(ds), f"{cfg.name} on {split}") as update:
                self._crafted[memo] = run_attack(self._lab.models.plain(), ds.images, ds.labels, cfg,
                                                 seed=seed, tta=self._lab.tta, keys=ds.indices, progress=update)
        return self._crafted[memo]
