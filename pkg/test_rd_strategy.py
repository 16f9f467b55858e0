import unittest

import numpy as np

import detector
import tensor as T
from errors import ShapeError
from pseudo_labels import PseudoLabel
from rd_strategy import (
    RepresentationDistribution,
    mean_representation_kl,
    rd_loss,
    representation_probs,
    student_objective,
    student_step,
)
from scenes import augment_pair, generate_dataset


def at_one_location(*distributions):
    return RepresentationDistribution.from_probs([np.array(d, dtype=float).reshape(1, -1, 1, 1) for d in distributions])


def unlabeled_batch(seed, size=2):
    """Augmented pairs with ground truth standing in as pseudo-labels."""
    rng = np.random.default_rng(seed)
    scenes = generate_dataset(seed, count=2 * size, split_ratio=0.5).labeled[:size]
    pairs = [augment_pair(scene, rng) for scene in scenes]
    labels = [[PseudoLabel(o.class_id, o.box, 1.0, (1.0,) * 4) for o in scene.objects] for scene in scenes]
    return rng, pairs, labels


def perturbed(params, rng, scale=0.05):
    return detector.ParameterSet({n: t.data + rng.normal(0.0, scale, t.shape) for n, t in params.items()})


class TestRdLoss(unittest.TestCase):
    def test_hand_values(self):
        """
        Test KL([0.5, 0.5] || [0.25, 0.75]) and the reverse direction.
        """
        half, skewed = at_one_location([0.5, 0.5]), at_one_location([0.25, 0.75])
        self.assertAlmostEqual(rd_loss(half, skewed).item(), 0.5 * np.log(4 / 3), places=12)
        self.assertAlmostEqual(rd_loss(half, skewed).item(), 0.14384, delta=1e-5)
        self.assertAlmostEqual(rd_loss(skewed, half).item(), 0.13081, delta=1e-5)

    def test_zero_at_equality(self):
        """
        Test identical distributions have zero divergence.
        """
        p = at_one_location([0.1, 0.2, 0.7])
        self.assertLessEqual(abs(rd_loss(p, p).item()), 1e-12)

    def test_non_negative(self):
        """
        Test the divergence of 1000 random pairs is never negative.
        """
        rng = np.random.default_rng(0)
        for _ in range(1000):
            a, b = rng.dirichlet(np.ones(5), size=2)
            self.assertGreaterEqual(rd_loss(at_one_location(a), at_one_location(b)).item(), -1e-15)

    def test_shape_mismatch(self):
        """
        Test distributions with different channel counts are rejected.
        """
        with self.assertRaises(ShapeError):
            rd_loss(at_one_location([0.5, 0.5]), at_one_location([0.2, 0.3, 0.5]))

    def test_level_count_mismatch(self):
        """
        Test a different number of levels is rejected.
        """
        one = at_one_location([0.5, 0.5])
        two = RepresentationDistribution(one.probs * 2, one.log_probs * 2)
        with self.assertRaises(ShapeError):
            rd_loss(one, two)


class TestRepresentation(unittest.TestCase):
    def test_constant_features_are_uniform(self):
        """
        Test a constant feature map gives 1/C on every channel.
        """
        dist = RepresentationDistribution.from_features([T.Tensor(np.full((2, 4, 3, 3), 2.5))])
        np.testing.assert_allclose(dist.probs[0].data, 0.25, rtol=1e-12)

    def test_channels_sum_to_one(self):
        """
        Test backbone distributions are normalised over channels.
        """
        params = detector.init_params(np.random.default_rng(0))
        views = generate_dataset(0, count=4, split_ratio=0.5).labeled
        dist = representation_probs(params, views)
        self.assertEqual(len(dist.probs), 2)
        for level in dist.probs:
            np.testing.assert_allclose(level.data.sum(axis=1), 1.0, atol=1e-12)

    def test_flipped_views_line_up(self):
        """
        Test a flipped view's distribution is flipped back to the base frame.
        """
        params = detector.init_params(np.random.default_rng(1))
        scene = generate_dataset(1, count=2, split_ratio=0.5).labeled[0]
        mirrored = type(scene)(scene.image[:, ::-1].copy(), scene.objects)
        raw = representation_probs(params, [mirrored])
        restored = representation_probs(params, [mirrored], [True])
        for a, b in zip(raw.probs, restored.probs):
            np.testing.assert_array_equal(b.data, a.data[..., ::-1])

    def test_mean_kl_of_identical_models(self):
        """
        Test identical weights give zero mean divergence.
        """
        params = detector.init_params(np.random.default_rng(2))
        views = generate_dataset(2, count=4, split_ratio=0.5).labeled
        self.assertLessEqual(abs(mean_representation_kl(params, params.copy(), views)), 1e-12)


class TestStudentStep(unittest.TestCase):
    def setUp(self):
        self.rng, self.pairs, self.labels = unlabeled_batch(4)
        self.teacher = detector.init_params(self.rng)
        self.student = perturbed(self.teacher, self.rng)

    def test_without_disagreement_is_pseudo_label_descent(self):
        """
        Test lambda_d 0 moves the student by -xi lambda_u grad L_unsup.
        """
        leaves = self.student.as_leaves()
        with T.GradTape() as tape:
            outputs = detector.forward(leaves, [p.strong.image for p in self.pairs])
            unsup, _ = detector.detection_loss(outputs, self.labels, detector.LossConfig())
            tape.backward(unsup)
        grads = leaves.gradients()

        stepped, stats = student_step(self.student, self.pairs, self.labels, self.teacher, 0.01, 4.0, 0.0)
        for name, t in self.student.items():
            np.testing.assert_allclose(stepped[name].data, t.data - 0.01 * 4.0 * grads[name], rtol=0, atol=1e-12)
        self.assertAlmostEqual(stats["loss_unsup"], unsup.item(), places=12)

    def test_literal_sign_mirrors_the_step(self):
        """
        Test the literal update moves by the same amount the other way.
        """
        down, _ = student_step(self.student, self.pairs, self.labels, self.teacher, 0.01, 4.0, 1.0)
        up, _ = student_step(self.student, self.pairs, self.labels, self.teacher, 0.01, 4.0, 1.0, gradient_ascent=True)
        for name, t in self.student.items():
            np.testing.assert_allclose((down[name].data + up[name].data) / 2.0, t.data, rtol=0, atol=1e-12)

    def test_no_active_terms(self):
        """
        Test zero weights and no labeled batch leave the student unchanged.
        """
        stepped, stats = student_step(self.student, self.pairs, self.labels, self.teacher, 0.1, 0.0, 0.0)
        self.assertTrue(stepped.equals(self.student))
        self.assertGreater(stats["loss_rd"], 0.0)

    def test_bad_learning_rate(self):
        """
        Test a non-positive learning rate is rejected.
        """
        with self.assertRaises(ValueError):
            student_step(self.student, self.pairs, self.labels, self.teacher, 0.0, 4.0, 1.0)

    def test_student_weights_untouched(self):
        """
        Test the step returns new weights and keeps its inputs.
        """
        before = (self.student.fingerprint(), self.teacher.fingerprint())
        student_step(self.student, self.pairs, self.labels, self.teacher, 0.01, 4.0, 1.0)
        self.assertEqual((self.student.fingerprint(), self.teacher.fingerprint()), before)

    def test_objective_gradient(self):
        """
        Test the combined objective against central differences.
        """
        p_teacher = representation_probs(
            self.teacher.detached(), [p.weak for p in self.pairs], [p.flip_applied for p in self.pairs]
        )
        leaves = self.student.as_leaves()
        error = T.finite_diff_check(
            lambda: student_objective(leaves, self.pairs, self.labels, p_teacher, 4.0, 1.0)[0],
            leaves,
            coords=40,
            rng=np.random.default_rng(0),
            atol=1e-9,
        )
        self.assertLessEqual(error, 1e-4)

    def test_disagreement_ascent(self):
        """
        Test a pure disagreement step raises L_RD on the same batch in at least 9 of 10 seeds.
        """
        rises = 0
        for seed in range(10):
            rng, pairs, labels = unlabeled_batch(100 + seed)
            teacher = detector.init_params(rng)
            student = perturbed(teacher, rng)
            p_teacher = representation_probs(
                teacher.detached(), [p.weak for p in pairs], [p.flip_applied for p in pairs]
            )
            _, before = student_objective(student, pairs, labels, p_teacher, 0.0, 1.0)
            stepped, _ = student_step(student, pairs, labels, p_teacher, 1e-3, 0.0, 1.0)
            _, after = student_objective(stepped, pairs, labels, p_teacher, 0.0, 1.0)
            rises += after["loss_rd"] >= before["loss_rd"]
        self.assertGreaterEqual(rises, 9)


if __name__ == "__main__":
    unittest.main()
