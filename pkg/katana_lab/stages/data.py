"""
Data stage: the four splits of one experiment.

Train and test sets come from the configured source; the train set loses
its train-val slice and the test set its test-val slice. Split indices are
positions in the full train or test set.
"""

from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Optional, Tuple

import structlog

from ..data import Dataset, generate_synthetic, load_cifar10_binary, split
from ..exceptions import DatasetError
from ..seeding import derive_seed

if TYPE_CHECKING:
    from ..lab import KatanaLab

log = structlog.get_logger(__name__)

SPLIT_NAMES = ("train", "train_val", "test", "test_val")


@dataclass(frozen=True)
class Splits:
    train: Dataset
    train_val: Dataset
    test: Dataset
    test_val: Dataset

    def get(self, name: str) -> Dataset:
        if name not in SPLIT_NAMES:
            raise DatasetError(f"unknown split {name!r}; known: {SPLIT_NAMES}")
        return getattr(self, name)


class DataStage:
    def __init__(self, lab: "KatanaLab"):
        self._lab = lab
        self._splits: Optional[Splits] = None

    def load(self) -> Tuple[Dataset, Dataset]:
        """Full (train, test) sets before splitting."""
        cfg = self._lab.config
        spec = cfg.dataset
        if spec.source == "cifar10":
            return load_cifar10_binary(spec.path, "train"), load_cifar10_binary(spec.path, "test")
        seed = derive_seed(cfg.seed, "dataset", spec.seed)
        train = generate_synthetic(spec.classes, spec.train_per_class, spec.size, derive_seed(seed, "train"),
                                   name=f"{spec.name}-train")
        test = generate_synthetic(spec.classes, spec.test_per_class, spec.size, derive_seed(seed, "test"),
                                  name=f"{spec.name}-test")
        return train, test

    def splits(self) -> Splits:
        if self._splits is None:
            cfg = self._lab.config
            full_train, full_test = self.load()
            spec = replace(cfg.split, seed=derive_seed(cfg.seed, "split", cfg.split.seed))
            train, train_val = split(full_train, spec, kind="train")
            test, test_val = split(full_test, spec, kind="test")
            self._splits = Splits(train, train_val, test, test_val)
            log.info("splits_ready", dataset=cfg.dataset.name, train=len(train), train_val=len(train_val),
                     test=len(test), test_val=len(test_val))
        return self._splits

    def get(self, name: str) -> Dataset:
        return self.splits().get(name)
