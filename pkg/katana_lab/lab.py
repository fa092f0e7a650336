"""
KatanaLab: main entry point for running experiments.

    lab = KatanaLab.from_file("configs/desk.yaml", output_dir="results/")

    table = lab.experiments.evaluate()
    curve = lab.experiments.ablate_n()
    model = lab.models.plain()
"""

from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterator, Optional, Union

from tqdm import tqdm

from .cache import LogitsCache
from .config import ExperimentConfig, TtaConfig
from .stages.attacks import AttackStage
from .stages.data import DataStage
from .stages.defenses import DefenseStage
from .stages.experiments import ExperimentStage
from .stages.models import ModelStage


class KatanaLab:
    def __init__(self, config: ExperimentConfig, show_progress: bool = False):
        self.config = config
        self.show_progress = show_progress
        self.cache = LogitsCache(config.resolved_cache_dir)

        self.data = DataStage(self)
        self.models = ModelStage(self)
        self.attacks = AttackStage(self)
        self.defenses = DefenseStage(self)
        self.experiments = ExperimentStage(self)

    @classmethod
    def from_file(cls, path: Union[str, Path], show_progress: bool = False, **overrides) -> "KatanaLab":
        """YAML config with environment overrides applied; keyword overrides win over both."""
        config = ExperimentConfig.load(path)
        if overrides:
            config = config.with_overrides(**overrides)
        return cls(config, show_progress=show_progress)

    @property
    def output_dir(self) -> Path:
        return Path(self.config.output_dir)

    @property
    def tta(self) -> TtaConfig:
        """Defender TTA config; the translation bound follows the image size."""
        size = self.config.dataset.size
        return self.config.tta if size == 32 else self.config.tta.for_image_size(size)

    @contextmanager
    def progress(self, total: int, desc: str) -> Iterator[Optional[Callable[[int], None]]]:
        """Yields a callback taking the number of items done so far, or None when bars are off."""
        if not self.show_progress:
            yield None
            return
        with tqdm(total=total, desc=desc, leave=False) as bar:
            yield lambda done: bar.update(done - bar.n)
