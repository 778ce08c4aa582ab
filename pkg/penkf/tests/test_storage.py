import json
import tempfile
import unittest
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from penkf.models import SummaryRow
from penkf.storage import Resource, ResultStorage, format_cell


class ResourceTestCase(unittest.TestCase):
    def test_invalid_resource_with_no_name_nor_resource(self):
        with self.assertRaises(ValidationError):
            Resource()

    def test_resource_must_point_to_its_name(self):
        with self.assertRaises(ValidationError):
            Resource(name="summary.csv", resource="/tmp/other.csv")


class FormatCellTestCase(unittest.TestCase):
    def test_floats_round_trip(self):
        value = 0.1 + 0.2
        self.assertEqual(float(format_cell(value)), value)
        self.assertEqual(format_cell(np.float64(1.5)), "1.5")

    def test_other_cells(self):
        self.assertEqual(format_cell(None), "")
        self.assertEqual(format_cell(np.int64(3)), "3")
        self.assertEqual(format_cell(True), "true")
        self.assertEqual(format_cell("penkf"), "penkf")


class ResultStorageTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.storage = ResultStorage("test_storage", root=self.tmp.name)
        self.storage.setup()

    def test_storage_creates_valid_directory(self):
        self.assertTrue(self.storage.local_dir.is_dir())
        self.assertEqual(self.storage.local_dir, Path(self.tmp.name, "test_storage"))

    def test_csv_can_be_put(self):
        resource = self.storage.put_csv("series.csv", ["trial", "cycle", "rmse"], [[0, 1, 0.5], [0, 2, None]])

        self.assertEqual(Path(resource.resource).read_text(), "trial,cycle,rmse\n0,1,0.5\n0,2,\n")

    def test_csv_rows_must_match_header(self):
        with self.assertRaises(ValueError):
            self.storage.put_csv("bad.csv", ["a", "b"], [[1]])

    def test_json_can_be_put(self):
        self.storage.put_json("row.json", SummaryRow(method="enkf", trials=2))
        self.storage.put_json("meta.json", {"seed": 3})

        self.assertEqual(json.loads(Path(self.storage.local_dir, "row.json").read_text())["trials"], 2)
        self.assertEqual(json.loads(Path(self.storage.local_dir, "meta.json").read_text()), {"seed": 3})

    def test_clear_removes_every_artifact(self):
        self.storage.put_text("config.json", "{}")
        self.storage.put_csv("summary.csv", ["method"], [["enkf"]])
        removed = self.storage.clear()

        self.assertEqual(removed, ["config.json", "summary.csv"])
        self.assertFalse(Path(self.storage.local_dir, "config.json").exists())
        self.assertFalse(Path(self.storage.local_dir, "summary.csv").exists())
        self.assertTrue(self.storage.local_dir.is_dir())

    def test_clear_missing_directory(self):
        self.assertEqual(ResultStorage("never-written", root=self.tmp.name).clear(), [])

    def tearDown(self) -> None:
        self.tmp.cleanup()


if __name__ == "__main__":
    unittest.main()
