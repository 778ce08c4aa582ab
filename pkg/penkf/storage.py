import csv
import io
import json
import shutil
from pathlib import Path
from typing import Any, Iterable, List, Optional, Sequence, Union

import numpy as np
from filelock import FileLock
from pydantic import BaseModel, validator

from penkf.config import settings
from penkf.logger import get_logger

logger = get_logger(__name__)


class Resource(BaseModel):
    name: str
    resource: str

    @validator("resource")
    def resource_must_end_with_name(cls, v, values, **kwargs):
        assert str(v).endswith(values.get("name", "")), "invalid resource"
        return v


def format_cell(value: Any) -> str:
    """
    CSV cell text: floats with their shortest round-trip representation, `None` as empty.
    """
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


class ResultStorage:
    """
    Output directory `<root>/<experiment name>` for CSV and JSON artifacts.

    Writes hold a lock on the directory so concurrent runs aimed at the same experiment do not
    interleave their files.
    """

    def __init__(self, experiment_name: str, root: Optional[Union[str, Path]] = None):
        self.experiment_name = experiment_name
        self.root = Path(root if root is not None else settings.DATA_DIR)
        self.local_dir = Path(self.root, self.experiment_name)

    def setup(self) -> Resource:
        """
        Setup directory tree.
        """
        self.local_dir.mkdir(parents=True, exist_ok=True)
        return Resource(name=self.experiment_name, resource=str(self.local_dir))

    @property
    def lock(self) -> FileLock:
        return FileLock(str(Path(self.local_dir, ".penkf.lock")))

    def put_text(self, name: str, text: str) -> Resource:
        self.setup()
        file_path = Path(self.local_dir, name)
        with self.lock:
            # newline="" keeps "\n" on every platform
            with open(file_path, "w", encoding="utf8", newline="") as f:
                f.write(text)
        logger.info(f"Wrote {file_path}")
        return Resource(name=name, resource=str(file_path))

    def put_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Resource:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"row has {len(row)} cells, header {len(header)}")
            writer.writerow([format_cell(value) for value in row])
        return self.put_text(name, buffer.getvalue())

    def put_json(self, name: str, data: Union[BaseModel, dict]) -> Resource:
        if isinstance(data, BaseModel):
            text = data.json(indent=2)
        else:
            text = json.dumps(data, indent=2, sort_keys=True, default=str)
        return self.put_text(name, text + "\n")

    def clear(self) -> List[str]:
        """
        Delete artifacts of earlier runs. Returns what was removed.
        """
        if not self.local_dir.is_dir():
            return []
        removed = []
        with self.lock:
            for item in sorted(self.local_dir.iterdir()):
                if item.name.startswith(".penkf.lock"):
                    continue
                if item.is_dir():
                    shutil.rmtree(item, ignore_errors=True)
                else:
                    item.unlink()
                removed.append(item.name)
        if removed:
            logger.warning(f"Removed {len(removed)} earlier artifacts from {self.local_dir}")
        return removed
