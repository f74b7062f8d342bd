import json
import logging
import os
import shutil
import tempfile
import unittest
from unittest import mock

from tomokit.utils import (THREADS_ENV, configure_logging, resolve_threads, sha256_file, spawn_seeds,
                           write_manifest)
from tomokit.version import __version__


class TestThreads(unittest.TestCase):
    def test_explicit_value_wins(self):
        with mock.patch.dict(os.environ, {THREADS_ENV: "3"}):
            self.assertEqual(resolve_threads(2), 2)
            self.assertEqual(resolve_threads(None), 3)
            self.assertEqual(resolve_threads(0), 3)

    def test_bad_environment_falls_back(self):
        with mock.patch.dict(os.environ, {THREADS_ENV: "many"}):
            with self.assertLogs("tomokit.utils", level="WARNING"):
                self.assertEqual(resolve_threads(), os.cpu_count() or 1)
        with mock.patch.dict(os.environ, {THREADS_ENV: "-4"}):
            self.assertEqual(resolve_threads(), os.cpu_count() or 1)


class TestSeeds(unittest.TestCase):
    def test_children_are_stable_and_distinct(self):
        first = [s.generate_state(2).tolist() for s in spawn_seeds(11, 4)]
        again = [s.generate_state(2).tolist() for s in spawn_seeds(11, 4)]
        self.assertEqual(first, again)
        self.assertEqual(len({tuple(s) for s in first}), 4)
        other = [s.generate_state(2).tolist() for s in spawn_seeds(12, 4)]
        self.assertNotEqual(first, other)


class TestManifest(unittest.TestCase):
    def setUp(self):
        self.output_dir = tempfile.mkdtemp(prefix="tomokit_manifest_")

    def tearDown(self):
        if os.path.exists(self.output_dir):
            shutil.rmtree(self.output_dir)

    def test_manifest_records_inputs(self):
        source = os.path.join(self.output_dir, "input.bin")
        with open(source, "wb") as f:
            f.write(b"tomokit")
        run_dir = os.path.join(self.output_dir, "run")
        path = write_manifest(run_dir, "simulate", "[simulation]\nscenes = 2\n", inputs=[source],
                              extra={"scenes": 2})
        with open(path, encoding="utf-8") as f:
            manifest = json.load(f)
        self.assertEqual(manifest["command"], "simulate")
        self.assertEqual(manifest["version"], __version__)
        self.assertEqual(manifest["scenes"], 2)
        self.assertEqual(manifest["inputs"][os.path.abspath(source)], sha256_file(source))
        with open(os.path.join(run_dir, "config.ini"), encoding="utf-8") as f:
            self.assertEqual(f.read(), "[simulation]\nscenes = 2\n")


class TestLogging(unittest.TestCase):
    def setUp(self):
        root = logging.getLogger()
        self.saved = (list(root.handlers), root.level)

    def tearDown(self):
        root = logging.getLogger()
        root.handlers[:] = self.saved[0]
        root.setLevel(self.saved[1])

    def test_levels_and_single_handler(self):
        for verbosity, level in ((-1, logging.WARNING), (0, logging.INFO), (2, logging.DEBUG)):
            configure_logging(verbosity)
            root = logging.getLogger()
            self.assertEqual(root.level, level)
            self.assertEqual(len(root.handlers), 1)


if __name__ == "__main__":
    unittest.main()
