import unittest

import numpy as np

from networks import MLP
from oracles import gradient_check
from tensor_autodiff import (
    AdamState,
    Graph,
    GraphError,
    NonFiniteError,
    Parameter,
    ShapeError,
    Tensor,
    adam_step,
    add,
    backward,
    concat,
    l2_norm,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    slice_last,
    square,
    stop_gradient,
    sub,
)


class TestForwardOps(unittest.TestCase):
    def test_l2_norm(self):
        """3-4-5 triangle."""
        self.assertEqual(l2_norm(np.array([3.0, 4.0])).item(), 5.0)

    def test_relu(self):
        out = relu(np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_shape_mismatch_names_both_shapes(self):
        with self.assertRaises(ShapeError) as ctx:
            matmul(np.ones((2, 3)), np.ones((4, 5)))
        self.assertIn("(2, 3)", str(ctx.exception))
        self.assertIn("(4, 5)", str(ctx.exception))
        with self.assertRaises(ShapeError):
            add(np.ones(3), np.ones(4))

    def test_non_finite_input_rejected(self):
        with self.assertRaises(NonFiniteError):
            square(np.array([1.0, np.nan]))
        with self.assertRaises(NonFiniteError):
            relu(np.array([np.inf]))

    def test_slice_and_concat(self):
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(slice_last(x, 1, 3).data, [[1.0, 2.0], [4.0, 5.0]])
        np.testing.assert_array_equal(concat([x, x[:, :1]]).data, [[0, 1, 2, 0], [3, 4, 5, 3]])
        with self.assertRaises(ShapeError):
            slice_last(x, 2, 5)

    def test_constants_stay_off_the_graph(self):
        graph = Graph()
        w = graph.watch(Parameter([1.0, 2.0]))
        reduce_sum(square(np.array([1.0, 1.0])))
        self.assertEqual(len(graph.nodes), 1)
        reduce_sum(square(w))
        self.assertEqual(len(graph.nodes), 3)

    def test_foreign_graph_rejected(self):
        a = Graph().watch(Parameter([1.0]))
        b = Graph().watch(Parameter([1.0]))
        with self.assertRaises(GraphError):
            add(a, b)


class TestBackward(unittest.TestCase):
    def test_sum_of_squares(self):
        """d/dx sum(x^2) = 2x."""
        x = Parameter([1.0, 2.0])
        graph = Graph()
        grads = backward(graph, reduce_sum(square(graph.watch(x))))
        np.testing.assert_array_equal(grads[x], [2.0, 4.0])

    def test_mean(self):
        x = Parameter([1.0, -2.0, 3.0, 0.5])
        graph = Graph()
        grads = backward(graph, reduce_mean(graph.watch(x)))
        np.testing.assert_array_equal(grads[x], [0.25] * 4)

    def test_stop_gradient_blocks_flow(self):
        x = Parameter([1.5, -2.0])
        graph = Graph()
        blocked = stop_gradient(graph.watch(x))
        np.testing.assert_array_equal(blocked.data, x.data)
        grads = backward(graph, reduce_sum(square(blocked)))
        np.testing.assert_array_equal(grads[x], [0.0, 0.0])

    def test_non_scalar_root_rejected(self):
        x = Parameter([1.0, 2.0])
        graph = Graph()
        with self.assertRaises(GraphError):
            backward(graph, square(graph.watch(x)))

    def test_unreachable_parameters_get_zeros(self):
        x, unused = Parameter([1.0, 2.0]), Parameter(np.ones((2, 2)))
        graph = Graph()
        graph.watch(unused)
        grads = backward(graph, reduce_sum(graph.watch(x)), params=[unused, Parameter([3.0])])
        np.testing.assert_array_equal(grads[unused], np.zeros((2, 2)))
        self.assertEqual(len(grads), 3)

    def test_gradient_accumulates_over_reuse(self):
        x = Parameter([3.0])
        graph = Graph()
        xt = graph.watch(x)
        grads = backward(graph, reduce_sum(mul(xt, xt)))
        np.testing.assert_array_equal(grads[x], [6.0])

    def test_broadcast_bias_gradient(self):
        b = Parameter([0.0, 0.0])
        graph = Graph()
        out = add(np.ones((3, 2)), graph.watch(b))
        grads = backward(graph, reduce_sum(out))
        np.testing.assert_array_equal(grads[b], [3.0, 3.0])

    def test_l2_norm_of_zero_has_zero_subgradient(self):
        x = Parameter([0.0, 0.0])
        graph = Graph()
        grads = backward(graph, reduce_sum(l2_norm(graph.watch(x))))
        np.testing.assert_array_equal(grads[x], [0.0, 0.0])

    def test_mlp_matches_finite_differences(self):
        """Random 2-layer MLP, scalar output, central differences at step 1e-5."""
        rng = np.random.default_rng(3)
        net = MLP((4, 6, 3), rng)
        x = rng.normal(size=(5, 4))
        w = rng.normal(size=(5, 3))
        result = gradient_check("mlp", lambda g: reduce_sum(mul(net.forward(g, Tensor(x)), w)),
                                net.parameters(), rng, coords_per_tensor=50)
        self.assertGreater(result.checked, 0)
        self.assertLess(result.max_rel_error, 1e-4)


class TestAdam(unittest.TestCase):
    def test_zero_gradient_leaves_params(self):
        p = Parameter([1.0, -1.0])
        state = AdamState.for_params([p])
        adam_step([p], {p: np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -1.0])
        self.assertEqual(state.t, 1)

    def test_first_step_magnitude_is_lr(self):
        w = Parameter([1.0])
        state = AdamState.for_params([w])
        adam_step([w], {w: np.array([1.0])}, state, lr=0.001)
        self.assertAlmostEqual(w.data[0], 0.999, places=9)

    def test_quadratic_convergence(self):
        """1000 steps on (w - 3)^2 from 0 at lr 0.01."""
        w = Parameter([0.0])
        state = AdamState.for_params([w])
        for _ in range(1000):
            graph = Graph()
            loss = reduce_sum(square(sub(graph.watch(w), 3.0)))
            adam_step([w], backward(graph, loss), state, lr=0.01)
        self.assertLess(abs(w.data[0] - 3.0), 0.05)
        self.assertEqual(state.t, 1000)

    def test_parameters_get_fresh_arrays(self):
        p = Parameter([1.0])
        before = p.data
        adam_step([p], {p: np.array([1.0])}, AdamState.for_params([p]), lr=0.1)
        self.assertEqual(before[0], 1.0)
        self.assertIsNot(p.data, before)

    def test_shape_mismatch_rejected(self):
        p = Parameter([1.0, 2.0])
        with self.assertRaises(ShapeError):
            adam_step([p], {p: np.zeros(3)}, AdamState.for_params([p]), lr=0.1)
        with self.assertRaises(ShapeError):
            adam_step([p], {p: np.zeros(2)}, AdamState(), lr=0.1)


if __name__ == "__main__":
    unittest.main()
