"""Run directory layout and config snapshots."""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from .core import AdversarialConfig
from .errors import ConfigError

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
CONFIG_HASH_FILE = "config.sha256"
METRICS_FILE = "metrics.jsonl"
VAL_LOG_FILE = "val_log.jsonl"
LOG_FILE = "run.log"


class RunDirectory:
    """Everything one training run produces.

    The config snapshot is written before the first training step; later
    commands on the same directory verify it against its stored hash.
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    @property
    def config_path(self) -> Path:
        return self.path / CONFIG_FILE

    @property
    def metrics_path(self) -> Path:
        return self.path / METRICS_FILE

    @property
    def val_log_path(self) -> Path:
        return self.path / VAL_LOG_FILE

    @property
    def log_path(self) -> Path:
        return self.path / LOG_FILE

    @property
    def checkpoint_dir(self) -> Path:
        return self.path / "checkpoints"

    @property
    def latest_checkpoint(self) -> Path:
        return self.checkpoint_dir / "latest.pt"

    @property
    def best_checkpoint(self) -> Path:
        return self.checkpoint_dir / "best.pt"

    @property
    def reports_dir(self) -> Path:
        return self.path / "reports"

    def exists(self) -> bool:
        return self.config_path.exists()

    def create(self, cfg: AdversarialConfig, extra: Optional[Dict[str, Any]] = None) -> None:
        self.path.mkdir(parents=True, exist_ok=True)
        self.checkpoint_dir.mkdir(exist_ok=True)
        self.reports_dir.mkdir(exist_ok=True)
        cfg.save(self.config_path)
        (self.path / CONFIG_HASH_FILE).write_text(cfg.digest() + "\n", encoding="utf-8")
        if extra:
            self.write_json("run_info.json", extra)
        logger.info("Created run directory %s (config %s)", self.path, cfg.digest()[:12])

    def load_config(self) -> AdversarialConfig:
        if not self.config_path.exists():
            raise ConfigError(f"{self.path} is not a run directory (no {CONFIG_FILE})")
        cfg = AdversarialConfig.load(self.config_path)
        hash_path = self.path / CONFIG_HASH_FILE
        if hash_path.exists():
            stored = hash_path.read_text(encoding="utf-8").strip()
            if stored != cfg.digest():
                raise ConfigError(f"config snapshot in {self.path} does not match its stored hash")
        return cfg

    def verify(self, cfg: AdversarialConfig) -> None:
        stored = self.load_config()
        if stored.digest() != cfg.digest():
            raise ConfigError(
                f"{self.path} was created with a different config (hash {stored.digest()[:12]}, "
                f"requested {cfg.digest()[:12]})"
            )

    def read_info(self) -> Dict[str, Any]:
        path = self.path / "run_info.json"
        if not path.exists():
            return {}
        return json.loads(path.read_text(encoding="utf-8"))

    def write_json(self, name: str, data: Any) -> Path:
        path = self.path / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def reset_logs(self) -> None:
        """Start the metrics and validation streams over for a fresh run."""
        for path in (self.metrics_path, self.val_log_path):
            if path.exists():
                path.unlink()

    def checkpoint_files(self) -> List[Path]:
        """Numbered checkpoints, oldest first."""
        return sorted(self.checkpoint_dir.glob("ckpt-*.pt"))

    def prune_checkpoints(self, keep: int) -> List[Path]:
        """Delete all but the newest ``keep`` numbered checkpoints and whatever an alias points at."""
        pinned = set()
        for alias in (self.latest_checkpoint, self.best_checkpoint):
            if alias.is_symlink():
                pinned.add(os.readlink(alias))
        files = self.checkpoint_files()
        doomed = [p for p in files[:-keep] if p.name not in pinned]
        for path in doomed:
            path.unlink()
        if doomed:
            logger.debug("Pruned %d checkpoints in %s", len(doomed), self.checkpoint_dir)
        return doomed

    def report_path(self, name: str) -> Path:
        self.reports_dir.mkdir(parents=True, exist_ok=True)
        return self.reports_dir / name
