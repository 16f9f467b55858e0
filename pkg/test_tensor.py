import math
import unittest

import numpy as np

import tensor as T
from errors import DivergenceError, ShapeError


def leaf(values):
    return T.Tensor(values, requires_grad=True)


class TestPrimitives(unittest.TestCase):
    def test_channel_scale_single_weight(self):
        """
        Test a one-element weight scaled by omega 0.5.
        """
        out = T.channel_scale(T.Tensor([2.0]), T.Tensor([0.5]))
        self.assertEqual(out.data.tolist(), [1.0])

    def test_softmax_values(self):
        """
        Test softmax on a symmetric and a hand-evaluated input.
        """
        np.testing.assert_allclose(T.softmax(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])
        np.testing.assert_allclose(T.softmax(T.Tensor([math.log(2.0), 0.0])).data, [2 / 3, 1 / 3], atol=1e-15)

    def test_softmax_normalised(self):
        """
        Test softmax rows are nonnegative and sum to one.
        """
        rng = np.random.default_rng(3)
        probs = T.softmax(T.Tensor(rng.normal(scale=20.0, size=(50, 7)))).data
        self.assertTrue(np.all(probs >= 0.0))
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        """
        Test elementwise ops refuse implicit broadcasting.
        """
        with self.assertRaises(ShapeError):
            T.add(T.Tensor([1.0, 2.0]), T.Tensor([1.0]))
        with self.assertRaises(ShapeError):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))

    def test_non_finite_results_raise(self):
        """
        Test overflow and log of zero are reported as divergence.
        """
        with self.assertRaises(DivergenceError):
            T.power(T.Tensor([1e200]), 2.0)
        with self.assertRaises(DivergenceError):
            T.log(T.Tensor([0.0]))
        with self.assertRaises(DivergenceError):
            T.div(T.Tensor([1.0]), T.Tensor([0.0]))

    def test_flip_width_masked(self):
        """
        Test only masked samples are reversed.
        """
        x = T.Tensor(np.arange(8.0).reshape(2, 1, 1, 4))
        out = T.flip_width(x, [True, False]).data
        self.assertEqual(out[0, 0, 0].tolist(), [3.0, 2.0, 1.0, 0.0])
        self.assertEqual(out[1, 0, 0].tolist(), [4.0, 5.0, 6.0, 7.0])


class TestBackward(unittest.TestCase):
    def test_product_rule(self):
        """
        Test dL/domega for L = sum(w * omega * x).
        """
        w, omega, x = T.Tensor([2.0]), leaf([0.5]), T.Tensor([3.0])
        with T.GradTape() as tape:
            loss = T.reduce_sum(T.mul(T.channel_scale(w, omega), x))
            tape.backward(loss)
        self.assertEqual(omega.grad.tolist(), [6.0])

    def test_mean_gradient(self):
        """
        Test the gradient of a mean over four values.
        """
        v = leaf([1.0, 2.0, 3.0, 4.0])
        with T.GradTape() as tape:
            tape.backward(T.reduce_mean(v))
        self.assertEqual(v.grad.tolist(), [0.25] * 4)

    def test_non_scalar_root_rejected(self):
        """
        Test backward refuses a vector root.
        """
        v = leaf([1.0, 2.0])
        with T.GradTape() as tape:
            out = T.mul_scalar(v, 2.0)
            with self.assertRaises(ShapeError):
                tape.backward(out)

    def test_backward_without_tape(self):
        """
        Test the module-level backward needs an active tape.
        """
        with self.assertRaises(RuntimeError):
            T.backward(T.Tensor(1.0))

    def test_shared_input_accumulates(self):
        """
        Test a tensor used twice receives the sum of both paths.
        """
        v = leaf([3.0])
        with T.GradTape() as tape:
            tape.backward(T.reduce_sum(T.mul(v, v)))
        self.assertEqual(v.grad.tolist(), [6.0])

    def test_tape_cleared_after_backward(self):
        """
        Test the tape holds no records once replayed.
        """
        v = leaf([1.0])
        with T.GradTape() as tape:
            tape.backward(T.reduce_sum(T.softplus(v)))
            self.assertEqual(tape.records, [])

    def test_three_layer_net_matches_central_differences(self):
        """
        Test a seeded conv/pool/dense net against finite differences.
        """
        rng = np.random.default_rng(11)
        x = T.Tensor(rng.normal(size=(2, 1, 8, 8)))
        w1 = leaf(rng.normal(size=(3, 1, 3, 3)))
        b1 = leaf(rng.normal(size=3))
        w2 = leaf(rng.normal(size=(48, 5)) * 0.3)
        w3 = leaf(rng.normal(size=(5, 1)))

        def loss_fn():
            h = T.max_pool2d(T.relu(T.conv2d(x, w1, b1, padding=1)))
            h = T.reshape(h, (2, 48))
            h = T.sigmoid(T.matmul(h, w2))
            return T.reduce_mean(T.softplus(T.matmul(h, w3)))

        self.assertLessEqual(T.finite_diff_check(loss_fn, [w1, b1, w2, w3], atol=1e-9), 1e-4)

    def test_primitives_match_central_differences(self):
        """
        Test every elementwise and layout primitive on random inputs.
        """
        rng = np.random.default_rng(5)
        for case in range(20):
            a = leaf(rng.uniform(0.5, 2.0, size=(3, 4)))
            b = leaf(rng.uniform(0.5, 2.0, size=(3, 4)))
            omega = leaf(rng.uniform(0.2, 1.0, size=3))

            def loss_fn():
                terms = [
                    T.div(a, b),
                    T.power(a, 1.5),
                    T.log_softmax(T.sub(a, b), axis=1),
                    T.softmax(T.mul(a, b), axis=0),
                    T.channel_scale(a, omega),
                    T.transpose(T.transpose(a, (1, 0)), (1, 0)),
                    T.log(b),
                ]
                flat = T.concat([T.reshape(t, (-1,)) for t in terms])
                return T.reduce_sum(T.mul(flat, T.Tensor(np.linspace(-1.0, 1.0, flat.size))))

            with self.subTest(case=case):
                self.assertLessEqual(T.finite_diff_check(loss_fn, [a, b, omega], atol=1e-9), 1e-4)


class TestFiniteDiffCheck(unittest.TestCase):
    def test_quadratic(self):
        """
        Test 0.5 * ||p||^2 is checked essentially exactly.
        """
        p = leaf([1.0, 2.0])
        error = T.finite_diff_check(lambda: T.mul_scalar(T.reduce_sum(T.mul(p, p)), 0.5), [p])
        self.assertEqual(p.grad.tolist(), [1.0, 2.0])
        self.assertLessEqual(error, 1e-8)

    def test_linear(self):
        """
        Test a linear loss has no central-difference error.
        """
        p = leaf([5.0])
        error = T.finite_diff_check(lambda: T.reduce_sum(T.mul_scalar(p, 3.0)), [p])
        self.assertLessEqual(error, 1e-10)

    def test_bad_step_rejected(self):
        """
        Test a non-positive step is rejected.
        """
        p = leaf([1.0])
        with self.assertRaises(ValueError):
            T.finite_diff_check(lambda: T.reduce_sum(p), [p], h=0.0)

    def test_restores_parameters(self):
        """
        Test perturbed coordinates are put back.
        """
        p = leaf([0.3, -0.7])
        T.finite_diff_check(lambda: T.reduce_sum(T.sigmoid(p)), [p])
        self.assertEqual(p.data.tolist(), [0.3, -0.7])

    def test_restores_parameters_when_loss_fails(self):
        """
        Test a loss that raises mid-check leaves the coordinate unperturbed.
        """
        p = leaf([1.0, 2.0])
        calls = []

        def loss_fn():
            calls.append(1)
            if len(calls) > 1:
                raise DivergenceError("log of a non-positive value")
            return T.reduce_sum(p)

        with self.assertRaises(DivergenceError):
            T.finite_diff_check(loss_fn, [p])
        self.assertEqual(p.data.tolist(), [1.0, 2.0])


class TestNamedTensors(unittest.TestCase):
    def test_copy_and_equality(self):
        """
        Test copies compare equal and share fingerprints.
        """
        named = T.NamedTensors({"a": np.arange(3.0), "b": np.ones((2, 2))})
        clone = named.copy()
        self.assertTrue(named.equals(clone))
        self.assertEqual(named.fingerprint(), clone.fingerprint())
        clone["a"].data[0] = 9.0
        self.assertFalse(named.equals(clone))

    def test_leaves_and_detached(self):
        """
        Test as_leaves marks gradients and detached does not.
        """
        named = T.NamedTensors({"a": [1.0]})
        self.assertTrue(all(t.requires_grad for t in named.as_leaves().values()))
        self.assertFalse(any(t.requires_grad for t in named.as_leaves().detached().values()))

    def test_determinism(self):
        """
        Test the same seed and ops give bit-identical tensors.
        """
        results = []
        for _ in range(2):
            rng = np.random.default_rng(1)
            x = T.Tensor(rng.normal(size=(1, 1, 4, 4)))
            w = T.Tensor(rng.normal(size=(2, 1, 3, 3)))
            results.append(T.conv2d(x, w, padding=1).data)
        self.assertTrue(np.array_equal(results[0], results[1]))


if __name__ == "__main__":
    unittest.main()
