import numpy as np
import pytest

from rekd import tensor as T
from rekd.gumbel import discretize_st, gumbel_softmax, sample_noise, soft_surrogate
from rekd.losses import kd_pred, kd_rationale, task_ce
from rekd.models import (BackboneSpec, GeneratorNet, PredictorNet, RationaleModel, apply_mask,
                         generator_forward, predictor_forward)
from rekd.tensor import Rng, ShapeError, Tensor

SPECS = [
    BackboneSpec("per-feature-mlp", 1, 8, 1, 6, 3, 4),
    BackboneSpec("per-feature-mlp", 2, 5, 1, 6, 3, 2),
    BackboneSpec("tiny-transformer", 1, 8, 2, 6, 3, 4),
    BackboneSpec("tiny-transformer", 2, 4, 1, 6, 3, 3),
]


def rand_x(spec, *lead, seed=0):
    return Rng(seed, (1,)).generator.normal(size=lead + (spec.L, spec.D))


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind}-d{s.depth}-w{s.width}")
def test_output_shapes(spec):
    m = RationaleModel.build(spec, 0)
    assert generator_forward(m.generator, rand_x(spec)).shape == (spec.L, 2)
    assert predictor_forward(m.predictor, rand_x(spec)).shape == (spec.C,)
    assert m.generator(rand_x(spec, 3)).shape == (3, spec.L, 2)
    assert m.predictor(rand_x(spec, 3)).shape == (3, spec.C)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind}-d{s.depth}-w{s.width}")
def test_build_is_deterministic(spec):
    a, b = RationaleModel.build(spec, 5), RationaleModel.build(spec, 5)
    assert a.checksum() == b.checksum()
    X = rand_x(spec, 2)
    assert np.array_equal(a.generator(X).data, b.generator(X).data)
    assert RationaleModel.build(spec, 6).checksum() != a.checksum()


def test_spec_validation():
    with pytest.raises(ValueError):
        BackboneSpec("lstm", 1, 8, 1, 6, 3, 4)
    with pytest.raises(ValueError):
        BackboneSpec("tiny-transformer", 1, 6, 4, 6, 3, 4)
    with pytest.raises(ValueError):
        BackboneSpec("per-feature-mlp", 0, 8, 1, 6, 3, 4)


def test_wrong_input_shape_rejected():
    spec = SPECS[0]
    m = RationaleModel.build(spec, 0)
    with pytest.raises(ShapeError):
        m.generator(np.zeros((2, spec.L + 1, spec.D)))


@pytest.mark.parametrize("spec", [SPECS[0], SPECS[2]], ids=["mlp", "transformer"])
def test_zero_head_gives_bias(spec):
    m = RationaleModel.build(spec, 0)
    m.generator.params["gen.head.w"].data[:] = 0.0
    m.predictor.params["pred.head.w"].data[:] = 0.0
    Z = m.generator(rand_x(spec)).data
    assert np.array_equal(Z, np.broadcast_to(m.generator.params["gen.head.b"].data, Z.shape))
    assert np.array_equal(m.predictor(rand_x(spec)).data, m.predictor.params["pred.head.b"].data)


def test_mlp_generator_is_permutation_equivariant():
    spec = SPECS[0]
    g = GeneratorNet(spec, Rng(3))
    X = rand_x(spec)
    perm = Rng(4).generator.permutation(spec.L)
    assert np.allclose(g(X[perm]).data, g(X).data[perm], atol=1e-12)


def test_apply_mask_examples():
    X = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(apply_mask(X, [0.0, 1.0]).data, [[0, 0], [3, 4]])
    assert np.array_equal(apply_mask(X, [1.0, 1.0]).data, X)
    assert np.array_equal(apply_mask(X, [0.0, 0.0]).data, np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        apply_mask(X, [1.0, 1.0, 0.0])


@pytest.mark.parametrize("spec", [SPECS[0], SPECS[2]], ids=["mlp", "transformer"])
def test_all_ones_mask_equals_raw_forward(spec):
    f = PredictorNet(spec, Rng(1))
    X = rand_x(spec, 3)
    assert np.array_equal(f(apply_mask(X, np.ones((3, spec.L)))).data, f(X).data)


@pytest.mark.parametrize("spec", [SPECS[0], SPECS[2]], ids=["mlp", "transformer"])
def test_masked_rows_cannot_change_prediction(spec):
    m = RationaleModel.build(spec, 2)
    gen = Rng(8).generator
    for _ in range(200):
        X = gen.normal(size=(spec.L, spec.D))
        M = (gen.random(spec.L) < 0.4).astype(float)
        Y = X.copy()
        Y[M == 0] = gen.normal(0, 100, size=(int((M == 0).sum()), spec.D))
        assert np.array_equal(m.predictor(apply_mask(X, M)).data, m.predictor(apply_mask(Y, M)).data)


@pytest.mark.parametrize("spec", [SPECS[0], SPECS[2]], ids=["mlp", "transformer"])
def test_pipeline_gradient_wrt_selection_logits(spec):
    m = RationaleModel.build(spec, 0)
    X = rand_x(spec, 2)
    G = sample_noise(Rng(1), spec.L, 2)
    y = np.array([0, 1])

    def loss(Z):
        S = gumbel_softmax(Z, G, 0.8)
        return task_ce(m.predictor(apply_mask(X, discretize_st(S))), y)

    Z0 = Tensor(m.generator(X).data)
    with soft_surrogate():
        assert T.grad_check(loss, Z0) < 1e-4


def test_load_state_checks_names_and_shapes():
    spec = SPECS[0]
    m = RationaleModel.build(spec, 0)
    state = m.state()
    bad = dict(state)
    bad["gen.head.w"] = np.zeros((1, 1))
    with pytest.raises(ShapeError):
        m.load_state(bad)
    m2 = RationaleModel.build(spec, 9)
    m2.load_state(state)
    assert m2.checksum() == m.checksum()


def test_distillation_across_architectures():
    """A transformer teacher feeds an MLP student: only Z- and Q-shaped logits cross."""
    t_spec = BackboneSpec("tiny-transformer", 1, 8, 2, 6, 3, 4)
    s_spec = BackboneSpec("per-feature-mlp", 2, 5, 1, 6, 3, 4)
    teacher, student = RationaleModel.build(t_spec, 0), RationaleModel.build(s_spec, 1)
    X = rand_x(s_spec, 3)
    G = sample_noise(Rng(2), 6, 3)
    with T.no_record():
        S_T = gumbel_softmax(teacher.generator(X), G, 1.0)
        Q_T = teacher.predictor(apply_mask(X, discretize_st(S_T)))
    with T.recording() as rec:
        S_S = gumbel_softmax(student.generator(X), G, 1.0)
        Q_S = student.predictor(apply_mask(X, discretize_st(S_S)))
        loss = T.add(kd_rationale(S_T, S_S), kd_pred(Q_T, Q_S, 1.0))
    T.backward(rec, loss)
    assert all(p.grad is not None for p in student.parameters())
    assert all(p.grad is None for p in teacher.parameters())
