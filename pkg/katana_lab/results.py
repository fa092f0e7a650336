"""Results tables, CSV writers and run manifests."""

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

from .exceptions import KatanaError

RESULTS_HEADER = ("dataset", "defense", "attack", "clean_accuracy", "clean_std", "adversarial_accuracy", "seed")
TIMINGS_HEADER = ("dataset", "defense", "attack", "seconds")


def _fmt(value: float) -> str:
    return f"{value:.4f}"


@dataclass
class ResultRow:
    dataset: str
    defense: str
    attack: str
    clean_accuracy: float
    clean_std: float
    adversarial_accuracy: float
    seed: int
    wall_time: float = 0.0

    def __post_init__(self):
        for name in ("clean_accuracy", "adversarial_accuracy"):
            value = getattr(self, name)
            if not 0.0 <= value <= 100.0:
                raise KatanaError(f"{name} {value} outside [0, 100]", stage="results")

    def csv_fields(self) -> List[str]:
        return [self.dataset, self.defense, self.attack, _fmt(self.clean_accuracy), _fmt(self.clean_std),
                _fmt(self.adversarial_accuracy), str(self.seed)]


@dataclass
class ResultsTable:
    rows: List[ResultRow] = field(default_factory=list)
    artifacts: Dict[str, str] = field(default_factory=dict)

    def add(self, row: ResultRow) -> ResultRow:
        self.rows.append(row)
        return row

    def find(self, defense: str, attack: str) -> ResultRow:
        for row in self.rows:
            if row.defense == defense and row.attack == attack:
                return row
        raise KeyError(f"no row for defense={defense!r}, attack={attack!r}")

    def to_csv(self, path: Union[str, Path]) -> Path:
        return write_csv(path, RESULTS_HEADER, (r.csv_fields() for r in self.rows))

    def timings_csv(self, path: Union[str, Path]) -> Path:
        return write_csv(path, TIMINGS_HEADER,
                         ([r.dataset, r.defense, r.attack, f"{r.wall_time:.3f}"] for r in self.rows))

    def to_records(self) -> List[Dict[str, Any]]:
        return [asdict(r) for r in self.rows]


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
    return path


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_manifest(path: Union[str, Path], payload: Dict[str, Any], status: str = "complete",
                   error: Optional[KatanaError] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = dict(payload, status=status)
    if error is not None:
        body["error"] = error.to_record()
    path.write_text(json.dumps(body, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path
