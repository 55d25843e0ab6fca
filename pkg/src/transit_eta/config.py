"""Pipeline configuration: INI file with sections, overridable from the CLI.

The file is looked up from ``--config``, else the ``TRANSIT_ETA_CONFIG``
environment variable, else built-in defaults are used.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

CONFIG_ENV = "TRANSIT_ETA_CONFIG"


@dataclass
class GridSection:
    origin_lon: float = 72.83
    origin_lat: float = 21.17
    edge_m: float = 25.0


@dataclass
class SegmentSection:
    eps_grid: int = 20
    dilation: float = 5e-4
    sliver_m: float = 10.0


@dataclass
class IngestSection:
    first_hour: int = 8
    n_slots: int = 12
    utc_offset_h: float = 0.0
    snap_max_m: float = 50.0
    backward_tol_m: float = 100.0


@dataclass
class ModelSection:
    h: int = 4
    alpha: float = 0.85
    k: float = 0.65
    lr: float = 0.01
    epochs: int = 300
    seed: int = 0
    gcn_hidden: int = 16
    lstm_hidden: int = 32
    optimizer: str = "adam"
    train_fraction: float = 0.75


@dataclass
class EtaSection:
    alpha_prime: float = 0.9
    tick_s: float = 10.0


@dataclass
class PipelineConfig:
    grid: GridSection = field(default_factory=GridSection)
    segment: SegmentSection = field(default_factory=SegmentSection)
    ingest: IngestSection = field(default_factory=IngestSection)
    model: ModelSection = field(default_factory=ModelSection)
    eta: EtaSection = field(default_factory=EtaSection)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return asdict(self)

    def set(self, section: str, key: str, value: Any) -> None:
        sec = getattr(self, section)
        types = {f.name: f.type for f in fields(sec)}
        if key not in types:
            raise KeyError(f"unknown config key [{section}] {key}")
        setattr(sec, key, _coerce(getattr(sec, key), value))

    def write(self, path: str | Path) -> None:
        cp = configparser.ConfigParser()
        for name, values in self.to_dict().items():
            cp[name] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in values.items()}
        with open(path, "w") as fh:
            cp.write(fh)


def _coerce(current: Any, value: Any) -> Any:
    if isinstance(current, bool):
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return str(value)


def load_config(path: str | Path | None = None) -> PipelineConfig:
    """Defaults overlaid with the given file (or ``$TRANSIT_ETA_CONFIG``)."""
    cfg = PipelineConfig()
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return cfg
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    cp = configparser.ConfigParser()
    cp.read(p)
    for section in cp.sections():
        if not hasattr(cfg, section):
            raise KeyError(f"{p}: unknown config section [{section}]")
        for key, value in cp[section].items():
            cfg.set(section, key, value)
    return cfg
