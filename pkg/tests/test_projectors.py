import itertools

import numpy as np
import pytest

from distillbench.numkit import SeededRng, finite_diff_grad, rel_error
from distillbench.projectors import (ARCHS, LogitProjector, Projector, ProjectorEnsemble, arch_dims,
                                     build_ensemble, ensemble_backward, ensemble_project, project,
                                     project_logits, project_logits_backward)

from .oracles import triple_loop


def test_identity_relu_passes_nonnegative():
    S = np.abs(SeededRng(0).normal((4, 3)))
    out, _ = project(Projector([np.eye(4)], "relu"), S)
    np.testing.assert_array_equal(out, S)


def test_negative_identity_relu_zeroes():
    S = np.abs(SeededRng(0).normal((4, 3)))
    out, _ = project(Projector([-np.eye(4)], "relu"), S)
    assert not np.any(out)


def test_two_layer_matches_reevaluation():
    rng = SeededRng(1)
    W1, W2 = rng.normal((5, 3)), rng.normal((5, 5))
    S = rng.normal((3, 4))
    out, _ = project(Projector([W1, W2], "relu"), S)
    expected = np.maximum(triple_loop(W2, np.maximum(triple_loop(W1, S), 0)), 0)
    np.testing.assert_allclose(out, expected, atol=1e-12, rtol=0)


def test_project_shape_error():
    with pytest.raises(ValueError):
        project(Projector([np.eye(3)]), np.zeros((4, 2)))


class TestEnsemble:
    def test_single_member_equals_project(self):
        e = build_ensemble(4, 3, 1, base_seed=5)
        S = SeededRng(2).normal((4, 6))
        F, _ = ensemble_project(e, S)
        G, _ = project(e.members[0], S)
        assert F.tobytes() == G.tobytes()

    def test_identical_members(self):
        W = SeededRng(3).normal((3, 4))
        e = ProjectorEnsemble([Projector([W.copy()]) for _ in range(3)])
        S = SeededRng(4).normal((4, 5))
        F, _ = ensemble_project(e, S)
        G, _ = project(e.members[0], S)
        np.testing.assert_allclose(F, G, atol=1e-15, rtol=0)

    def test_hand_case(self):
        e = ProjectorEnsemble([Projector([np.array([[2.0]])], "none"), Projector([np.array([[4.0]])], "none")])
        F, _ = ensemble_project(e, np.array([[1.0]]))
        assert F[0, 0] == 3.0

    def test_empty(self):
        with pytest.raises(ValueError):
            ProjectorEnsemble([])

    def test_mismatched_members(self):
        with pytest.raises(ValueError):
            ProjectorEnsemble([Projector([np.eye(2)]), Projector([np.eye(3)])])

    def test_linear_ensemble_collapses_to_mean_weight(self):
        e = build_ensemble(5, 4, 3, "1L", "none", base_seed=8)
        S = SeededRng(9).normal((5, 7))
        F, _ = ensemble_project(e, S)
        W_bar = sum(m.weights[0] for m in e.members) / 3
        np.testing.assert_allclose(F, W_bar @ S, atol=1e-12, rtol=0)

    def test_zero_upstream_gradient(self):
        e = build_ensemble(4, 3, 2, "2L")
        S = SeededRng(0).normal((4, 3))
        _, tape = ensemble_project(e, S)
        grads, dS = ensemble_backward(e, tape, np.zeros((3, 3)))
        assert not np.any(dS)
        assert all(not np.any(g) for gs in grads for g in gs)

    def test_linear_adjoint(self):
        W = SeededRng(1).normal((3, 4))
        e = ProjectorEnsemble([Projector([W], "none")])
        S, dF = SeededRng(2).normal((4, 5)), SeededRng(3).normal((3, 5))
        _, tape = ensemble_project(e, S)
        grads, dS = ensemble_backward(e, tape, dF)
        np.testing.assert_allclose(grads[0][0], dF @ S.T, atol=1e-14)
        np.testing.assert_allclose(dS, W.T @ dF, atol=1e-14)

    def test_stale_tape(self):
        e = build_ensemble(3, 3, 2)
        _, tape = ensemble_project(e, np.ones((3, 2)))
        e.touch()
        with pytest.raises(RuntimeError):
            ensemble_backward(e, tape, np.ones((3, 2)))


def _ensemble_fd_errors(arch, act, seed):
    rng = SeededRng(seed)
    d, m, b = 4, 3, 3
    e = build_ensemble(d, m, 3, arch, act, "mixed", base_seed=seed)
    S = rng.normal((d, b))
    R = rng.normal((m, b))  # random linear functional of the output

    def scalar(ens, feats):
        return float(np.sum(R * ensemble_project(ens, feats)[0]))

    _, tape = ensemble_project(e, S)
    grads, dS = ensemble_backward(e, tape, R)
    errs = [rel_error(dS, finite_diff_grad(lambda x: scalar(e, x), S))]
    for k, member in enumerate(e.members):
        for j, W in enumerate(member.weights):
            def f(v, W=W):
                saved = W.copy()
                W[...] = v
                out = scalar(e, S)
                W[...] = saved
                return out
            errs.append(rel_error(grads[k][j], finite_diff_grad(f, W.copy())))
    return errs


@pytest.mark.parametrize("arch,act", list(itertools.product(ARCHS, ["relu", "gelu", "none"])))
def test_ensemble_backward_finite_differences(arch, act):
    assert max(_ensemble_fd_errors(arch, act, 21)) < 1e-6


class TestBuild:
    def test_members_distinct(self):
        e = build_ensemble(4, 4, 3, "1L", "relu")
        Ws = [m.weights[0] for m in e.members]
        assert all(W.shape == (4, 4) for W in Ws)
        for a, b in itertools.combinations(Ws, 2):
            assert np.max(np.abs(a - b)) > 0

    @pytest.mark.parametrize("arch,hidden", [("2Lx2", 8), ("2Lx3", 12), ("2L", 4)])
    def test_wide_hidden(self, arch, hidden):
        e = build_ensemble(5, 4, 1, arch)
        assert [w.shape for w in e.members[0].weights] == [(hidden, 5), (4, hidden)]

    def test_deep_chain(self):
        assert arch_dims("4L", 6, 3) == [(6, 3), (3, 3), (3, 3), (3, 3)]

    def test_deterministic(self):
        a = build_ensemble(4, 4, 3, "2L", init="mixed", base_seed=7)
        b = build_ensemble(4, 4, 3, "2L", init="mixed", base_seed=7)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.params(), b.params()))

    def test_member_seed_is_base_plus_k(self):
        a = build_ensemble(4, 4, 3, base_seed=10)
        b = build_ensemble(4, 4, 1, base_seed=12)
        assert a.members[2].weights[0].tobytes() == b.members[0].weights[0].tobytes()

    def test_mixed_cycles_strategies(self):
        e = build_ensemble(6, 6, 3, init="mixed")
        W_orth = e.members[2].weights[0]
        np.testing.assert_allclose(W_orth.T @ W_orth, np.eye(6), atol=1e-10)
        assert np.all(np.abs(e.members[0].weights[0]) <= 1 / np.sqrt(6))

    def test_invalid_arch(self):
        with pytest.raises(ValueError, match="arch"):
            build_ensemble(4, 4, 1, "5L")

    def test_invalid_q(self):
        with pytest.raises(ValueError):
            build_ensemble(4, 4, 0)


class TestLogitProjector:
    def test_identity(self):
        Z = SeededRng(0).normal((5, 3))
        assert project_logits(LogitProjector(np.eye(5)), Z).tobytes() == Z.tobytes()

    def test_zero(self):
        assert not np.any(project_logits(LogitProjector(np.zeros((5, 5))), SeededRng(0).normal((5, 3))))

    def test_matches_triple_loop(self):
        W, Z = SeededRng(1).normal((4, 4)), SeededRng(2).normal((4, 6))
        np.testing.assert_allclose(project_logits(LogitProjector(W), Z), triple_loop(W, Z), atol=1e-12, rtol=0)

    def test_backward_finite_differences(self):
        W, Z, R = SeededRng(1).normal((4, 4)), SeededRng(2).normal((4, 3)), SeededRng(3).normal((4, 3))
        lp = LogitProjector(W)
        dW, dZ = project_logits_backward(lp, Z, R)
        assert rel_error(dZ, finite_diff_grad(lambda z: np.sum(R * (W @ z)), Z)) < 1e-6
        assert rel_error(dW, finite_diff_grad(lambda w: np.sum(R * (w @ Z)), W)) < 1e-6

    def test_init_near_identity(self):
        lp = LogitProjector.init(6, SeededRng(0), noise=0.01)
        assert np.max(np.abs(lp.W_hat - np.eye(6))) <= 0.01 / np.sqrt(6)
        np.testing.assert_array_equal(LogitProjector.init(6, SeededRng(0), noise=0.0).W_hat, np.eye(6))

    def test_not_square(self):
        with pytest.raises(ValueError):
            LogitProjector(np.zeros((2, 3)))

    def test_shape_error(self):
        with pytest.raises(ValueError):
            project_logits(LogitProjector(np.eye(3)), np.zeros((4, 2)))
