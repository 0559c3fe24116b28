import math

import numpy as np
import pytest

from streamrec import nnkit
from streamrec.errors import NumericFailure
from streamrec.errors import ShapeMismatch
from streamrec.nnkit import AdamState
from streamrec.nnkit import Checkpoint
from streamrec.nnkit import Layer
from streamrec.nnkit import MlpParams


def test_sigmoid_is_stable():
    out = nnkit.sigmoid([-1000.0, 0.0, 1000.0])
    assert out.tolist() == [0.0, 0.5, 1.0]
    assert np.all(np.isfinite(out))


def test_softmax_with_mask():
    z = np.array([[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]])
    mask = np.array([[True, True, False], [False, False, False]])
    out = nnkit.softmax(z, axis=1, mask=mask)
    e = math.exp(1.0)
    np.testing.assert_allclose(out[0], [1 / (1 + e), e / (1 + e), 0.0])
    assert out[1].tolist() == [0.0, 0.0, 0.0]

    np.testing.assert_allclose(
        np.exp(nnkit.log_softmax(z, axis=1)), nnkit.softmax(z, axis=1)
    )


def test_binary_cross_entropy():
    loss, grad = nnkit.binary_cross_entropy(np.array([[0.5]]), np.array([[1.0]]))
    assert loss == pytest.approx(math.log(2.0))
    assert grad.tolist() == [[-2.0]]

    # two rows: loss is averaged over the batch, summed over columns
    loss, _ = nnkit.binary_cross_entropy(
        np.array([[0.5, 0.5], [0.5, 0.5]]), np.array([[1.0, 0.0], [0.0, 1.0]])
    )
    assert loss == pytest.approx(2 * math.log(2.0))

    loss, grad = nnkit.binary_cross_entropy(np.array([[0.0]]), np.array([[1.0]]))
    assert loss == pytest.approx(-math.log(nnkit.LOG_EPS))
    assert grad.tolist() == [[0.0]]

    with pytest.raises(ShapeMismatch):
        nnkit.binary_cross_entropy(np.zeros((2, 1)), np.zeros((1, 2)))


def test_mlp_construction_errors():
    w = np.zeros((2, 3))
    with pytest.raises(ValueError) as excinfo:
        MlpParams([Layer(w, np.zeros(3), "tanh")])
    assert "tanh" in str(excinfo.value)

    with pytest.raises(ShapeMismatch):
        MlpParams([Layer(w, np.zeros(3), "relu"), Layer(w, np.zeros(3), "relu")])

    with pytest.raises(ShapeMismatch):
        MlpParams.init([2, 3], ["relu", "relu"], np.random.default_rng(0))


def test_mlp_forward_shapes():
    gen = np.random.default_rng(0)
    mlp = MlpParams.init([4, 6, 2], ["relu", "identity"], gen)
    assert mlp.signature == "4->6->2"
    out, tape = nnkit.mlp_forward(mlp, np.ones((5, 4)))
    assert out.shape == (5, 2)
    assert len(tape.inputs) == 2

    with pytest.raises(ShapeMismatch):
        nnkit.mlp_forward(mlp, np.ones((5, 3)))
    with pytest.raises(ShapeMismatch):
        nnkit.mlp_backward(tape, np.ones((4, 2)))


@pytest.mark.parametrize("seed", range(5))  # type: ignore[misc]
def test_mlp_gradients_match_finite_differences(seed):
    gen = np.random.default_rng(seed)
    acts = ["sigmoid", "identity"]
    params = MlpParams.init([3, 4, 2], acts, gen).named_tensors("mlp")
    x = gen.normal(size=(6, 3))
    target = gen.normal(size=(6, 2))

    def loss_and_grads(p):
        mlp = MlpParams.from_tensors(p, "mlp", acts)
        out, tape = nnkit.mlp_forward(mlp, x)
        diff = out - target
        grads, _ = nnkit.mlp_backward(tape, diff)
        return 0.5 * float(np.sum(diff * diff)), grads.named_tensors("mlp")

    assert nnkit.grad_check(loss_and_grads, params) < 1e-5


def test_scatter_rows_accumulates():
    out = nnkit.scatter_rows((3, 2), [0, 2, 0], np.ones((3, 2)))
    assert out.tolist() == [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]]
    table = np.arange(6.0).reshape(3, 2)
    assert nnkit.gather_rows(table, [2, 0]).tolist() == [[4.0, 5.0], [0.0, 1.0]]


def test_adam_step_moves_against_gradient():
    params = {"w": np.array([1.0, -1.0])}
    state = AdamState.zeros(params)
    nnkit.adam_step(params, {"w": np.array([2.0, -0.5])}, state, lr=0.1)
    np.testing.assert_allclose(params["w"], [0.9, -0.9])
    assert state.step == 1

    with pytest.raises(ShapeMismatch):
        nnkit.adam_step(params, {"v": np.zeros(2)}, state)
    with pytest.raises(ShapeMismatch):
        nnkit.adam_step(params, {"w": np.zeros(3)}, state)


def test_adam_minimizes_convex_quadratic():
    scale = np.array([1.0, 2.0, 0.5])
    center = np.array([1.0, -2.0, 3.0])
    params = {"w": np.zeros(3)}
    state = AdamState.zeros(params)

    def loss():
        return 0.5 * float(np.sum(scale * (params["w"] - center) ** 2))

    seen = [loss()]
    for step in range(1, 3001):
        grad = scale * (params["w"] - center)
        nnkit.adam_step(params, {"w": grad}, state, lr=0.01)
        if step in (1000, 3000):
            seen.append(loss())
    assert seen[1] < 1e-2 * seen[0]
    assert seen[2] < 1e-2
    assert state.step == 3000


def test_ensure_finite():
    nnkit.ensure_finite(np.ones(3), "ok")
    with pytest.raises(NumericFailure) as excinfo:
        nnkit.ensure_finite(float("nan"), "ranking loss")
    assert "ranking loss" in str(excinfo.value)


def test_checkpoint_files(tmp_path):
    stem = tmp_path / "model"
    assert not nnkit.checkpoint_exists(stem)
    checkpoint = Checkpoint(
        "two_tower",
        {"table": np.array([[0.5, 1.0], [2.0, -4.0]]), "bias": np.array([0.25])},
        {"trained": True, "epoch_losses": [np.float64(1.5)], "seed": np.int64(3)},
    )
    nnkit.save_checkpoint(stem, checkpoint)
    assert nnkit.checkpoint_exists(stem)

    loaded = nnkit.load_checkpoint(stem)
    assert loaded.kind == "two_tower"
    assert loaded.trained
    assert loaded.metadata == {"trained": True, "epoch_losses": [1.5], "seed": 3}
    assert loaded.tensors["bias"].shape == (1,)
    np.testing.assert_array_equal(loaded.tensors["table"], checkpoint.tensors["table"])

    assert not Checkpoint("two_tower", {}).trained
