"""
Artifact tree of one experiment run.

<root>/config.json                   config echo
<root>/data/                         ground-truth images
<root>/measurements/                 forward model JSON + observation stack
<root>/checkpoints/                  training checkpoints
<root>/train_report.csv
<root>/reconstructions/              mean, std and sample images
<root>/dirty/                        dirty images (interferometric runs)
<root>/baselines/                    TV-RML and DIP outputs
<root>/metrics.csv, scores.csv, ring_profile.csv, summary.json
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
import structlog

from src.backend.core.exceptions import ArtifactNotFoundError
from src.backend.utils.array_io import (
    load_array,
    load_checkpoint,
    save_array,
    save_checkpoint,
    save_pgm,
)

logger = structlog.get_logger()

CSV_FLOAT_FORMAT = "%.10g"
CONFIG_FILE = "config.json"


class ArtifactStore:
    """Reads and writes the files of one run directory"""

    def __init__(self, root: Path):
        self.root = Path(root)

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def exists(self, *parts: str) -> bool:
        return self.path(*parts).exists()

    def require(self, *parts: str) -> Path:
        path = self.path(*parts)
        if not path.exists():
            raise ArtifactNotFoundError(f"Missing artifact {path}; run the earlier stage first", path=str(path))
        return path

    def ensure(self) -> "ArtifactStore":
        self.root.mkdir(parents=True, exist_ok=True)
        return self

    def write_text(self, relative: str, text: str) -> Path:
        path = self.path(relative)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        return path

    def write_json(self, relative: str, payload: Any) -> Path:
        return self.write_text(relative, json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def read_json(self, relative: str) -> Any:
        return json.loads(self.require(relative).read_text(encoding="utf-8"))

    def write_image(self, subdir: str, stem: str, image: np.ndarray) -> Tuple[Path, Path]:
        """Lossless VTN1 copy plus a viewable PGM"""
        vtn = save_array(self.path(subdir, f"{stem}.vtn"), image)
        pgm = save_pgm(self.path(subdir, f"{stem}.pgm"), image)
        return vtn, pgm

    def write_array(self, relative: str, array: np.ndarray) -> Path:
        return save_array(self.path(relative), array)

    def read_array(self, relative: str) -> np.ndarray:
        return load_array(self.require(relative))

    def write_csv(self, relative: str, frame: pd.DataFrame) -> Path:
        """Fixed float format and line ending so reruns are byte-identical"""
        path = self.path(relative)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
        logger.debug("CSV written", path=str(path), rows=len(frame))
        return path

    def read_csv(self, relative: str) -> pd.DataFrame:
        return pd.read_csv(self.require(relative))

    def checkpoint_path(self, iteration: int, prefix: str = "train") -> Path:
        return self.path("checkpoints", f"{prefix}_{iteration:07d}.ckpt")

    def write_checkpoint(self, iteration: int, arrays: Mapping[str, np.ndarray], meta: Dict[str, Any],
                         prefix: str = "train") -> Path:
        path = save_checkpoint(self.checkpoint_path(iteration, prefix), arrays, {**meta, "iteration": iteration})
        logger.info("Checkpoint saved", path=str(path), iteration=iteration)
        return path

    def clear_checkpoints(self, prefix: str = "train") -> int:
        """Delete earlier checkpoints of this prefix; returns how many were removed"""
        stale = sorted(self.path("checkpoints").glob(f"{prefix}_*.ckpt"))
        for path in stale:
            path.unlink()
        if stale:
            logger.info("Stale checkpoints removed", count=len(stale), prefix=prefix)
        return len(stale)

    def latest_checkpoint(self, prefix: str = "train") -> Optional[Path]:
        candidates = sorted(self.path("checkpoints").glob(f"{prefix}_*.ckpt"))
        return candidates[-1] if candidates else None

    def require_checkpoint(self, iteration: int, prefix: str = "train") -> Path:
        path = self.checkpoint_path(iteration, prefix)
        if not path.exists():
            raise ArtifactNotFoundError(f"Missing checkpoint {path}; run the train stage first", path=str(path))
        return path

    def read_checkpoint(self, path: Optional[Path] = None, prefix: str = "train") -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
        path = path or self.latest_checkpoint(prefix)
        if path is None:
            raise ArtifactNotFoundError("No checkpoint found", path=str(self.path("checkpoints")))
        return load_checkpoint(path)

    def listing(self) -> List[str]:
        """Relative paths of every file in the tree"""
        if not self.root.exists():
            return []
        return sorted(str(p.relative_to(self.root)) for p in self.root.rglob("*") if p.is_file())
