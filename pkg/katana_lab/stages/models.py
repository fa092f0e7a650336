from dataclasses import replace
from pathlib import Path
from typing import TYPE_CHECKING, List, Optional

import structlog

from .. import network
from ..network import TrainedModel
from ..seeding import derive_seed

if TYPE_CHECKING:
    from ..lab import KatanaLab

log = structlog.get_logger(__name__)


class ModelStage:
    """Classifiers of one experiment: the plain model and the ensemble members."""

    def __init__(self, lab: "KatanaLab"):
        self._lab = lab
        self._plain: Optional[TrainedModel] = None
        self._ensemble: Optional[List[TrainedModel]] = None

    def train(self, seed: int) -> TrainedModel:
        """Train one classifier on the train split; init and shuffling both follow ``seed``."""
        cfg = self._lab.config
        splits = self._lab.data.splits()
        model_config = replace(cfg.model, input_shape=splits.train.image_shape,
                               num_classes=splits.train.num_classes, seed=derive_seed(seed, "init"))
        train_config = replace(cfg.train, seed=derive_seed(seed, "sgd"))
        model = network.train(splits.train, splits.train_val, train_config, model_config=model_config)
        log.info("model_trained", model=model.model_id, train_val_accuracy=model.info.train_val_accuracy)
        return model

    def plain(self) -> TrainedModel:
        if self._plain is None:
            cfg = self._lab.config
            num_classes = self._lab.data.splits().train.num_classes
            if cfg.model_path:
                self._plain = network.load(cfg.model_path, num_classes=num_classes)
                log.info("model_loaded", path=cfg.model_path, model=self._plain.model_id)
            else:
                self._plain = self.train(derive_seed(cfg.seed, "plain"))
        return self._plain

    def ensemble(self) -> List[TrainedModel]:
        """``ensemble_size`` classifiers that differ only in their seeds."""
        if self._ensemble is None:
            cfg = self._lab.config
            self._ensemble = [self.train(derive_seed(cfg.seed, "ensemble", i)) for i in range(cfg.ensemble_size)]
        return self._ensemble

    def save_plain(self, path: Optional[Path] = None) -> Path:
        path = Path(path) if path else self._lab.output_dir / "model.bin"
        path.parent.mkdir(parents=True, exist_ok=True)
        network.save(self.plain(), path)
        return path
