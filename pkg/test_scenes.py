import os
import struct
import tempfile
import unittest

import numpy as np

import scenes
from errors import FormatError
from metrics import iou_matrix
from scenes import AugmentConfig, GroundTruth, Scene


class TestGenerator(unittest.TestCase):
    def test_split_sizes(self):
        """
        Test 100 scenes at ratio 0.1 give 10 labeled and 90 unlabeled.
        """
        labeled, unlabeled = scenes.generate(42, 100, 0.1)
        self.assertEqual((len(labeled), len(unlabeled)), (10, 90))
        self.assertTrue(all(s.labeled for s in labeled))
        self.assertTrue(all(s.objects is None for s in unlabeled))

    def test_deterministic(self):
        """
        Test identical arguments give identical scenes.
        """
        first = scenes.generate_dataset(42, 30, 0.1, test_count=5)
        second = scenes.generate_dataset(42, 30, 0.1, test_count=5)
        self.assertEqual(scenes.dataset_bytes(first), scenes.dataset_bytes(second))

    def test_test_split_independent_of_training_count(self):
        """
        Test the test split comes from its own stream.
        """
        small = scenes.generate_dataset(3, 10, 0.5, test_count=4)
        large = scenes.generate_dataset(3, 50, 0.5, test_count=4)
        for a, b in zip(small.test, large.test):
            self.assertTrue(np.array_equal(a.image, b.image))

    def test_bad_arguments(self):
        """
        Test ratios outside (0, 1) and empty counts are rejected.
        """
        for ratio in (0.0, 1.0, 1.5):
            with self.subTest(ratio=ratio):
                with self.assertRaises(ValueError):
                    scenes.generate(1, 10, ratio)
        with self.assertRaises(ValueError):
            scenes.generate(1, 0, 0.5)

    def test_layout_constraints(self):
        """
        Test object sizes, bounds, count and overlap of generated scenes.
        """
        rng = np.random.default_rng(9)
        for _ in range(200):
            objects = scenes.sample_layout(rng)
            self.assertTrue(1 <= len(objects) <= scenes.MAX_OBJECTS)
            for obj in objects:
                x1, y1, x2, y2 = obj.box
                self.assertGreaterEqual(x2 - x1, 8)
                self.assertGreaterEqual(y2 - y1, 8)
                self.assertTrue(0 <= x1 and x2 <= 64 and 0 <= y1 and y2 <= 64)
            if len(objects) > 1:
                overlaps = iou_matrix([o.box for o in objects], [o.box for o in objects])
                np.fill_diagonal(overlaps, 0.0)
                self.assertLessEqual(overlaps.max(), scenes.MAX_OVERLAP)

    def test_class_histogram(self):
        """
        Test classes are drawn uniformly.
        """
        rng = np.random.default_rng(7)
        counts = np.zeros(3)
        for _ in range(10000):
            for obj in scenes.sample_layout(rng):
                counts[obj.class_id] += 1
        shares = counts / counts.sum()
        for share in shares:
            self.assertAlmostEqual(share, 1 / 3, delta=0.02)

    def test_render_textures(self):
        """
        Test rendered pixels follow the class textures on the background.
        """
        obj = GroundTruth(1, (10.0, 10.0, 22.0, 22.0))
        image = scenes.render([obj])
        self.assertEqual(image[0, 0], scenes.BACKGROUND)
        self.assertEqual(image[10, 10], 0.9)
        self.assertEqual(image[10, 12], 0.4)


class TestAugmentation(unittest.TestCase):
    def setUp(self):
        self.scene = Scene(np.linspace(0.0, 1.0, 64 * 64).reshape(64, 64), [GroundTruth(0, (10.0, 5.0, 20.0, 30.0))])
        self.rng = np.random.default_rng(0)

    def test_forced_flip(self):
        """
        Test a forced flip reflects boxes as W - x.
        """
        view, flipped = scenes.weak_augment(self.scene, self.rng, force=True)
        self.assertTrue(flipped)
        self.assertEqual(view.objects[0].box, (44.0, 5.0, 54.0, 30.0))
        self.assertTrue(np.array_equal(view.image, self.scene.image[:, ::-1]))

    def test_forced_identity(self):
        """
        Test a forced identity returns the scene unchanged.
        """
        view, flipped = scenes.weak_augment(self.scene, self.rng, force=False)
        self.assertFalse(flipped)
        self.assertIs(view, self.scene)

    def test_flip_is_involution(self):
        """
        Test flipping twice restores the scene exactly.
        """
        twice = scenes.flip_scene(scenes.flip_scene(self.scene))
        self.assertTrue(np.array_equal(twice.image, self.scene.image))
        self.assertEqual(twice.objects, self.scene.objects)

    def test_zero_strength_is_identity(self):
        """
        Test the zero config leaves the image alone.
        """
        view = scenes.strong_augment(self.scene, self.rng, AugmentConfig.zero())
        self.assertTrue(np.array_equal(view.image, self.scene.image))

    def test_cutout_fill(self):
        """
        Test a cutout sets exactly one rectangle to the fill value.
        """
        config = AugmentConfig(brightness=0.0, contrast=0.0, noise_std=0.0, cutout_probability=1.0)
        view = scenes.strong_augment(self.scene, self.rng, config)
        changed = view.image != self.scene.image
        rows, cols = np.nonzero(changed)
        self.assertTrue(np.all(view.image[changed] == 0.5))
        block = view.image[rows.min():rows.max() + 1, cols.min():cols.max() + 1]
        self.assertTrue(np.all((block == 0.5)))

    def test_strong_keeps_boxes_and_range(self):
        """
        Test strong views keep boxes and stay inside [0, 1].
        """
        for _ in range(20):
            view = scenes.strong_augment(self.scene, self.rng)
            self.assertEqual(view.objects, self.scene.objects)
            self.assertTrue(np.all((view.image >= 0.0) & (view.image <= 1.0)))

    def test_jitter_mean_bounds(self):
        """
        Test jitter on a constant 0.5 image keeps the mean in [0.3, 0.7].
        """
        flat = Scene(np.full((64, 64), 0.5), [])
        config = AugmentConfig(noise_std=0.0, cutout_probability=0.0)
        for seed in range(100):
            view = scenes.strong_augment(flat, np.random.default_rng(seed), config)
            self.assertTrue(0.3 - 1e-12 <= view.image.mean() <= 0.7 + 1e-12)

    def test_pair_strong_view_in_base_frame(self):
        """
        Test the strong view is never flipped, whatever the weak view does.
        """
        for seed in range(10):
            pair = scenes.augment_pair(self.scene, np.random.default_rng(seed))
            self.assertEqual(pair.strong.objects, self.scene.objects)

    def test_sample_batch(self):
        """
        Test batches come without replacement when possible.
        """
        pool = [Scene(np.full((64, 64), i / 10.0), []) for i in range(10)]
        batch = scenes.sample_batch(pool, 10, self.rng)
        self.assertEqual(len({id(s) for s in batch}), 10)
        self.assertEqual(len(scenes.sample_batch(pool[:2], 5, self.rng)), 5)
        with self.assertRaises(ValueError):
            scenes.sample_batch([], 1, self.rng)


class TestContainer(unittest.TestCase):
    def setUp(self):
        self.folder = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.folder.name, "d.tmrd")

    def tearDown(self):
        self.folder.cleanup()

    def test_write_and_read(self):
        """
        Test a written dataset reads back with the same scenes.
        """
        dataset = scenes.generate_dataset(5, 12, 0.25, test_count=3)
        scenes.write_dataset(dataset, self.path)
        loaded = scenes.read_dataset(self.path)
        self.assertEqual((len(loaded.labeled), len(loaded.unlabeled), len(loaded.test)), (3, 9, 3))
        self.assertEqual(loaded.seed, 5)
        self.assertEqual(loaded.labeled[0].objects, dataset.labeled[0].objects)
        self.assertTrue(all(s.objects is None for s in loaded.unlabeled))
        self.assertEqual(scenes.dataset_bytes(loaded), scenes.dataset_bytes(dataset))

    def test_header_layout(self):
        """
        Test the header fields of the container.
        """
        data = scenes.dataset_bytes(scenes.generate_dataset(42, 100, 0.1, test_count=0))
        magic, version, height, width, classes, labeled, unlabeled, test, seed = struct.unpack_from(
            "<4sIIIIIIIQ", data
        )
        self.assertEqual((magic, version), (b"TMRD", 1))
        self.assertEqual((height, width, classes), (64, 64, 3))
        self.assertEqual((labeled, unlabeled, test, seed), (10, 90, 0, 42))

    def test_bad_magic(self):
        """
        Test a file with the wrong magic is rejected.
        """
        with open(self.path, "wb") as handle:
            handle.write(b"XXXX" + bytes(40))
        with self.assertRaisesRegex(FormatError, "bad magic"):
            scenes.read_dataset(self.path)

    def test_unsupported_version(self):
        """
        Test a newer container version is rejected.
        """
        data = bytearray(scenes.dataset_bytes(scenes.generate_dataset(1, 4, 0.5)))
        data[4:8] = struct.pack("<I", 2)
        with open(self.path, "wb") as handle:
            handle.write(bytes(data))
        with self.assertRaisesRegex(FormatError, "unsupported version"):
            scenes.read_dataset(self.path)

    def test_truncated(self):
        """
        Test a cut-off file is reported as truncated.
        """
        data = scenes.dataset_bytes(scenes.generate_dataset(1, 4, 0.5))
        with open(self.path, "wb") as handle:
            handle.write(data[:-10])
        with self.assertRaisesRegex(FormatError, "truncated"):
            scenes.read_dataset(self.path)


if __name__ == "__main__":
    unittest.main()
