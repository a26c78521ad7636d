"""
Result storage for experiment artifacts.

Every artifact embeds the resolved configuration and seed so that a single
file is enough to rerun the experiment that produced it:
- JSON reports carry them as top-level keys
- CSV files start with a ``# {json}`` metadata line before the header
"""
import csv
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np

from app.core.config import settings
from app.core.exceptions import ShapeError
from app.core.logging import get_logger
from app.models.grid import PathBatch, Partition
from app.services.mlp import ControlStack

logger = get_logger(__name__)

PATH_DUMP_HEADER = np.dtype("<i8")
PATH_DUMP_VALUES = np.dtype("<f8")


class ResultStore:
    """
    Writes reports, tables, checkpoints and path dumps under one directory.
    """

    def __init__(self, base_dir: Optional[str | Path] = None):
        self.base_path = Path(base_dir) if base_dir is not None else settings.output_path
        self.base_path.mkdir(parents=True, exist_ok=True)

    def path_for(self, name: str) -> Path:
        """Location of an artifact, with any path components stripped from ``name``."""
        return self.base_path / Path(name).name

    def _metadata(self, config: dict[str, Any], seed: int) -> dict[str, Any]:
        return {
            "schema_version": settings.REPORT_SCHEMA_VERSION,
            "created_at": datetime.now(timezone.utc).isoformat(),
            "seed": seed,
            "config": config,
        }

    def save_json(
        self, name: str, payload: dict[str, Any], config: dict[str, Any], seed: int
    ) -> Path:
        """
        Save a JSON report with metadata merged in.

        Args:
            name: File name inside the store
            payload: Report body
            config: Resolved experiment configuration
            seed: Run seed

        Returns:
            Path of the written file
        """
        path = self.path_for(name)
        document = {**self._metadata(config, seed), **payload}
        try:
            with path.open("w") as f:
                json.dump(document, f, indent=2, default=str)
        except OSError as e:
            logger.error(f"Failed to write report {path}: {e}")
            raise
        logger.info(f"Saved report: {path}")
        return path

    def save_csv(
        self,
        name: str,
        header: list[str],
        rows: Iterable[Iterable[Any]],
        config: dict[str, Any],
        seed: int,
    ) -> Path:
        """Save a CSV whose first line is ``# {metadata json}``."""
        path = self.path_for(name)
        try:
            with path.open("w", newline="") as f:
                f.write("# " + json.dumps(self._metadata(config, seed), default=str) + "\n")
                writer = csv.writer(f)
                writer.writerow(header)
                for row in rows:
                    writer.writerow(list(row))
        except OSError as e:
            logger.error(f"Failed to write table {path}: {e}")
            raise
        logger.info(f"Saved table: {path}")
        return path

    def load_json(self, name: str) -> Optional[dict[str, Any]]:
        path = self.path_for(name)
        if not path.exists():
            logger.warning(f"Report not found: {path}")
            return None
        with path.open("r") as f:
            return json.load(f)

    def save_checkpoint(self, name: str, controls: ControlStack) -> Path:
        """ControlStack as JSON: layer sizes, scaling and row-major doubles."""
        path = self.path_for(name)
        with path.open("w") as f:
            json.dump(controls.to_dict(), f)
        logger.info(f"Saved checkpoint: {path} ({len(controls)} networks)")
        return path

    def load_checkpoint(self, name: str) -> ControlStack:
        with self.path_for(name).open("r") as f:
            return ControlStack.from_dict(json.load(f))

    def save_paths(self, name: str, batch: PathBatch) -> Path:
        """
        Binary path dump: little-endian int64 header (M, n, d1, seed) followed by
        float64 states (M, n+1, d1) and increments (M, n, d), row-major.
        """
        path = self.path_for(name)
        header = np.array(
            [batch.size, batch.partition.n, batch.dim_x, batch.seed], dtype=PATH_DUMP_HEADER
        )
        with path.open("wb") as f:
            f.write(header.tobytes())
            f.write(np.ascontiguousarray(batch.states, dtype=PATH_DUMP_VALUES).tobytes())
            f.write(np.ascontiguousarray(batch.increments, dtype=PATH_DUMP_VALUES).tobytes())
        return path

    def load_paths(self, name: str, partition: Partition) -> PathBatch:
        """
        Read a dump written by ``save_paths``.

        Raises:
            ShapeError: If the header disagrees with the partition or the file size
        """
        raw = self.path_for(name).read_bytes()
        header = np.frombuffer(raw[: 4 * PATH_DUMP_HEADER.itemsize], dtype=PATH_DUMP_HEADER)
        m, n, d1, seed = (int(v) for v in header)
        if n != partition.n:
            raise ShapeError(f"dump has n={n}, partition has n={partition.n}")
        values = np.frombuffer(raw[4 * PATH_DUMP_HEADER.itemsize:], dtype=PATH_DUMP_VALUES)
        state_count = m * (n + 1) * d1
        increment_count = values.size - state_count
        if m * n == 0 or increment_count <= 0 or increment_count % (m * n):
            raise ShapeError(f"dump body of {values.size} values does not match header")
        d = increment_count // (m * n)
        return PathBatch(
            states=values[:state_count].reshape(m, n + 1, d1).copy(),
            increments=values[state_count:].reshape(m, n, d).copy(),
            partition=partition,
            seed=seed,
        )


def read_csv_metadata(path: str | Path) -> dict[str, Any]:
    """Parse the ``# {json}`` line at the top of a CSV written by ResultStore."""
    with Path(path).open("r") as f:
        first = f.readline()
    if not first.startswith("# "):
        raise ValueError(f"{path} has no metadata line")
    return json.loads(first[2:])
