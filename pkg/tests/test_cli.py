import csv
import io
import json
import logging
import os
import shutil
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout

from tomokit.cli import EXIT_CLAIM, EXIT_CONFIG, EXIT_IO, EXIT_OK, build_parser, main
from tomokit.container import read_dataset, read_split, read_volumes, split_path
from tests.helpers import slow_enabled

TINY_CONFIG = """\
[geometry]
elevation_bins = 16
elevation_spacing = 4.0

[simulation]
scenes = 3
ranges = 32
azimuths = 12
seed = 0

[solver]
max_iters = 200

[network]
blocks = 2
channels = 2, 2

[training]
stage1_epochs = 1
stage1_batch = 64
stage2_epochs = 1
stage2_batch = 1
"""

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


def run(*argv):
    """Run the command line, returning (exit code, stdout, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(list(argv))
    return code, out.getvalue(), err.getvalue()


class CliTestCase(unittest.TestCase):
    def setUp(self):
        root = logging.getLogger()
        self.saved_logging = (list(root.handlers), root.level)
        self.work_dir = tempfile.mkdtemp(prefix="tomokit_cli_")
        self.config = os.path.join(self.work_dir, "tiny.ini")
        with open(self.config, "w", encoding="utf-8") as f:
            f.write(TINY_CONFIG)
        self.dataset = os.path.join(self.work_dir, "tiny.tsrd")

    def tearDown(self):
        root = logging.getLogger()
        root.handlers[:] = self.saved_logging[0]
        root.setLevel(self.saved_logging[1])
        if os.path.exists(self.work_dir):
            shutil.rmtree(self.work_dir)

    def simulate(self, path=None, *extra):
        code, out, err = run("simulate", "--config", self.config, "--out", path or self.dataset, "-q", *extra)
        self.assertEqual(code, EXIT_OK, err)
        return out


class TestHelp(unittest.TestCase):
    def test_every_subcommand_has_help(self):
        parser = build_parser()
        commands = ("simulate", "pretrain", "train", "reconstruct", "evaluate", "compare", "export")
        for command in commands:
            out = io.StringIO()
            with redirect_stdout(out), self.assertRaises(SystemExit) as caught:
                parser.parse_args([command, "--help"])
            self.assertEqual(caught.exception.code, 0)
            self.assertIn("--config", out.getvalue())

    def test_usage_errors_exit_2(self):
        with redirect_stderr(io.StringIO()), self.assertRaises(SystemExit) as caught:
            main(["reconstruct"])
        self.assertEqual(caught.exception.code, 2)


class TestSimulateAndReconstruct(CliTestCase):
    def test_simulate_writes_dataset_split_and_manifest(self):
        out = self.simulate(None, "--save-catalog", os.path.join(self.work_dir, "catalog.json"))
        self.assertIn("Simulated 3 scenes", out)
        records = read_dataset(self.dataset)
        self.assertEqual([r.name for r in records], ["scene_000", "scene_001", "scene_002"])
        self.assertEqual(records[0].echoes.shape, (11, 32, 12))
        self.assertEqual(records[0].truth.shape, (32, 12, 16))
        split = read_split(self.dataset, 3)
        self.assertEqual(sorted(split["train"] + split["val"] + split["test"]), [0, 1, 2])
        self.assertTrue(os.path.exists(split_path(self.dataset)))
        with open(os.path.join(self.work_dir, "manifest.json"), encoding="utf-8") as f:
            self.assertEqual(json.load(f)["scenes"], 3)

    def test_simulation_is_reproducible(self):
        again = os.path.join(self.work_dir, "again.tsrd")
        self.simulate()
        self.simulate(again, "--threads", "1")
        with open(self.dataset, "rb") as f, open(again, "rb") as g:
            self.assertEqual(f.read(), g.read())

    def test_catalog_input(self):
        catalog = os.path.join(self.work_dir, "catalog.json")
        self.simulate(None, "--save-catalog", catalog)
        copy = os.path.join(self.work_dir, "copy.tsrd")
        self.simulate(copy, "--catalog", catalog)
        with open(self.dataset, "rb") as f, open(copy, "rb") as g:
            self.assertEqual(f.read(), g.read())

    def test_reconstruct_and_evaluate(self):
        self.simulate()
        volumes_path = os.path.join(self.work_dir, "fista.tsrv")
        code, out, err = run("reconstruct", "--config", self.config, "--in", self.dataset,
                             "--method", "fista", "--out", volumes_path, "-q")
        self.assertEqual(code, EXIT_OK, err)
        volumes = read_volumes(volumes_path)
        self.assertEqual(list(volumes), ["scene_000", "scene_001", "scene_002"])
        self.assertEqual(volumes["scene_001"].shape, (32, 12, 16))

        code, out, err = run("evaluate", "--config", self.config, "--data", self.dataset,
                             "--volumes", volumes_path, "-q")
        self.assertEqual(code, EXIT_OK, err)
        with open(os.path.join(self.work_dir, "fista.metrics.csv"), newline="") as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows[0], ["scene", "completeness", "accuracy", "n_reconstructed", "n_truth"])
        self.assertEqual(len(rows), 4)
        self.assertGreater(float(rows[1][1]), 0.0)

    def test_export(self):
        self.simulate()
        truth_xyz = os.path.join(self.work_dir, "truth.xyz")
        code, out, err = run("export", "--config", self.config, "--data", self.dataset,
                             "--out", truth_xyz, "-q")
        self.assertEqual(code, EXIT_OK, err)
        self.assertIn("ground-truth points", out)

        volumes_path = os.path.join(self.work_dir, "ista.tsrv")
        run("reconstruct", "--config", self.config, "--in", self.dataset, "--method", "ista",
            "--out", volumes_path, "--split", "train", "-q")
        name = next(iter(read_volumes(volumes_path)))
        png_dir = os.path.join(self.work_dir, "png")
        code, out, err = run("export", "--config", self.config, "--data", self.dataset, "--volumes",
                             volumes_path, "--name", name, "--format", "png", "--out", png_dir, "-q")
        self.assertEqual(code, EXIT_OK, err)
        self.assertEqual(len(os.listdir(png_dir)), 32)
        self.assertTrue(os.path.exists(os.path.join(png_dir, f"{name}_ae_0000.png")))


class TestTrainingCommands(CliTestCase):
    def test_pretrain_train_compare(self):
        self.simulate()
        stage1 = os.path.join(self.work_dir, "stage1")
        code, out, err = run("pretrain", "--config", self.config, "--data", self.dataset,
                             "--out-dir", stage1, "-q")
        self.assertEqual(code, EXIT_OK, err)
        self.assertTrue(os.path.exists(os.path.join(stage1, "stage1_best.tswt")))

        stage2 = os.path.join(self.work_dir, "stage2")
        code, out, err = run("train", "--config", self.config, "--data", self.dataset,
                             "--init", os.path.join(stage1, "stage1_best.tswt"), "--out-dir", stage2, "-q")
        self.assertEqual(code, EXIT_OK, err)
        checkpoint = os.path.join(stage2, "stage2_best.tswt")
        self.assertTrue(os.path.exists(checkpoint))

        compare_dir = os.path.join(self.work_dir, "compare")
        code, out, err = run("compare", "--config", self.config, "--data", self.dataset,
                             "--checkpoint", checkpoint, "--methods", "fista,unfolding,proposed",
                             "--split", "all", "--out-dir", compare_dir, "--check", "-q")
        self.assertIn(code, (EXIT_OK, EXIT_CLAIM), err)
        self.assertIn("Claim", out)
        with open(os.path.join(compare_dir, "comparison.csv"), newline="") as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows[0][1:3], ["fista_completeness", "fista_accuracy"])
        self.assertEqual(len(rows), 5)

        volumes_path = os.path.join(self.work_dir, "proposed.tsrv")
        code, out, err = run("reconstruct", "--config", self.config, "--in", self.dataset,
                             "--method", "proposed", "--checkpoint", checkpoint, "--out", volumes_path, "-q")
        self.assertEqual(code, EXIT_OK, err)
        self.assertEqual(read_volumes(volumes_path)["scene_000"].shape, (32, 12, 16))


class TestExitCodes(CliTestCase):
    def test_missing_dataset(self):
        code, _, err = run("reconstruct", "--in", os.path.join(self.work_dir, "absent.tsrd"), "-q")
        self.assertEqual(code, EXIT_IO)
        self.assertIn("Error:", err)

    def test_bad_config(self):
        bad = os.path.join(self.work_dir, "bad.ini")
        with open(bad, "w", encoding="utf-8") as f:
            f.write("[training]\nstage1_lr = fast\n")
        code, _, err = run("simulate", "--config", bad, "--out", self.dataset, "-q")
        self.assertEqual(code, EXIT_CONFIG)
        self.assertIn("stage1_lr", err)

    def test_network_method_needs_checkpoint(self):
        self.simulate()
        code, _, err = run("reconstruct", "--config", self.config, "--in", self.dataset,
                           "--method", "proposed", "-q")
        self.assertEqual(code, EXIT_IO)
        self.assertIn("--checkpoint", err)

    def test_compare_argument_errors(self):
        self.simulate()
        out_dir = os.path.join(self.work_dir, "cmp")
        code, _, _ = run("compare", "--config", self.config, "--data", self.dataset, "--methods", "omp",
                         "--out-dir", out_dir, "-q")
        self.assertEqual(code, EXIT_CONFIG)
        code, _, err = run("compare", "--config", self.config, "--data", self.dataset, "--methods",
                           "fista,ista", "--split", "all", "--out-dir", out_dir, "--check", "-q")
        self.assertEqual(code, EXIT_CONFIG)
        self.assertIn("--check", err)
        self.assertFalse(os.path.exists(os.path.join(out_dir, "comparison.csv")))

    def test_thread_cap_must_be_positive(self):
        code, _, _ = run("simulate", "--config", self.config, "--out", self.dataset, "--threads", "0", "-q")
        self.assertEqual(code, EXIT_CONFIG)


@unittest.skipUnless(slow_enabled(), "set TOMOKIT_RUN_SLOW=1 for the desk-scale pipeline")
class TestDeskPipeline(CliTestCase):
    def test_desk_profile_end_to_end(self):
        desk = os.path.join(CONFIG_DIR, "desk.ini")
        code, _, err = run("simulate", "--config", desk, "--out", self.dataset, "-q")
        self.assertEqual(code, EXIT_OK, err)
        stage1 = os.path.join(self.work_dir, "stage1")
        stage2 = os.path.join(self.work_dir, "stage2")
        self.assertEqual(run("pretrain", "--config", desk, "--data", self.dataset, "--out-dir", stage1,
                             "-q")[0], EXIT_OK)
        self.assertEqual(run("train", "--config", desk, "--data", self.dataset, "--init",
                             os.path.join(stage1, "stage1_best.tswt"), "--out-dir", stage2, "-q")[0],
                         EXIT_OK)
        code, out, err = run("compare", "--config", desk, "--data", self.dataset, "--checkpoint",
                             os.path.join(stage2, "stage2_best.tswt"), "--out-dir",
                             os.path.join(self.work_dir, "compare"), "--check", "-q")
        self.assertEqual(code, EXIT_OK, out + err)


if __name__ == "__main__":
    unittest.main()
