"""Lattice losses against brute-force oracles and finite differences."""

import numpy as np
import pytest

from fnt import _kernels
from fnt.losses import (
    BudgetError,
    InfeasibleTargetError,
    LogitLattice,
    OutputAlphabet,
    TargetSeq,
    brute_force_ctc,
    brute_force_transducer,
    count_transducer_paths,
    ctc_loss,
    ctc_min_frames,
    lm_loss,
    total_loss,
    transducer_loss,
)
from fnt.rng import Rng
from fnt.tensor import ShapeError, Tensor, grad_check, log_softmax


def random_lattice(rng: Rng, T: int, L: int, U: int) -> LogitLattice:
    raw = rng.normal(size=(T, L + 1, 1 + U))
    post = raw - np.log(np.exp(raw).sum(-1, keepdims=True))
    return LogitLattice(Tensor(post[..., 0]), Tensor(post[..., 1:]))


def random_ctc_rows(rng: Rng, T: int, U: int) -> Tensor:
    raw = rng.normal(size=(T, U + 1))
    return Tensor(raw - np.log(np.exp(raw).sum(-1, keepdims=True)))


class TestAlphabet:
    def test_blanks_have_distinct_homes(self):
        ab = OutputAlphabet(5)
        assert ab.transducer_blank == 0
        assert ab.ctc_blank == 5

    def test_target_validation(self):
        with pytest.raises(ShapeError):
            TargetSeq([0, 7]).validate(5)


class TestTransducerLoss:
    def test_single_frame_empty_target(self):
        lat = random_lattice(Rng(1), 1, 0, 2)
        loss = transducer_loss(lat, [])
        np.testing.assert_allclose(loss.data, -lat.blank_logprob.data[0, 0], atol=1e-12)

    def test_certain_blank_rows_zero_loss(self):
        T = 3
        blank = Tensor(np.zeros((T, 1)))
        vocab = Tensor(np.full((T, 1, 2), -50.0))
        loss = transducer_loss(LogitLattice(blank, vocab), [])
        np.testing.assert_allclose(loss.data, 0.0, atol=1e-12)

    def test_matches_enumeration_on_uniform_grid(self):
        T, L, U = 2, 1, 2
        post = np.log(np.full((T, L + 1, 1 + U), 1.0 / 3.0))
        lat = LogitLattice(Tensor(post[..., 0]), Tensor(post[..., 1:]))
        got = transducer_loss(lat, [1]).item()
        want = brute_force_transducer(lat, [1])
        assert abs(got - want) <= 1e-12

    def test_oracle_equivalence_sweep(self):
        rng = Rng(2)
        worst = 0.0
        for _ in range(300):
            T = int(rng.integers(1, 5))
            L = int(rng.integers(0, 4))
            U = int(rng.integers(1, 4))
            lat = random_lattice(rng.child(f"{T}{L}{U}{_}"), T, L, U)
            target = [int(t) for t in rng.integers(0, U, size=L)]
            worst = max(worst, abs(transducer_loss(lat, target).item() - brute_force_transducer(lat, target)))
        assert worst <= 1e-8

    def test_gradient_through_lattice(self):
        rng = Rng(3)
        raw = Tensor(rng.normal(size=(3, 3, 4)), requires_grad=True)
        target = [1, 0]

        def f(t):
            post = log_softmax(t, axis=-1)
            return transducer_loss(LogitLattice(post[..., 0], post[..., 1:]), target)

        assert grad_check(f, raw) <= 1e-4

    def test_length_mismatch_and_nonfinite(self):
        lat = random_lattice(Rng(4), 2, 1, 2)
        with pytest.raises(ShapeError):
            transducer_loss(lat, [0, 1])
        lat.blank_logprob.data[0, 0] = np.inf
        with pytest.raises(ShapeError):
            transducer_loss(lat, [0])

    def test_monotone_in_on_path_symbol(self):
        # raising an on-path symbol's log-prob (others held fixed) never hurts;
        # equivalently the loss gradient w.r.t. every on-path entry is <= 0
        rng = Rng(5)
        for trial in range(20):
            T, L, U = 3, 2, 3
            raw = rng.child(str(trial)).normal(size=(T, L + 1, 1 + U))
            post = raw - np.log(np.exp(raw).sum(-1, keepdims=True))
            target = [0, 2]
            blank = Tensor(post[..., 0], requires_grad=True)
            vocab = Tensor(post[..., 1:], requires_grad=True)
            lat = LogitLattice(blank, vocab)
            base = transducer_loss(lat, target)
            base.backward()
            assert (blank.grad <= 1e-15).all()
            assert (vocab.grad <= 1e-15).all()
            bumped = post[..., 1:].copy()
            bumped[0, 0, target[0]] += 0.5
            lat2 = LogitLattice(Tensor(post[..., 0]), Tensor(bumped))
            assert transducer_loss(lat2, target).item() <= base.item() + 1e-12

    def test_permutation_sensitive(self):
        lat = random_lattice(Rng(6), 4, 2, 3)
        a = transducer_loss(lat, [0, 2]).item()
        b = transducer_loss(lat, [2, 0]).item()
        assert abs(a - b) > 1e-9


class TestBruteForceTransducer:
    def test_budget_refused(self):
        lat = random_lattice(Rng(7), 7, 0, 2)
        with pytest.raises(BudgetError):
            brute_force_transducer(lat, [])

    def test_single_path_when_forced(self):
        lat = random_lattice(Rng(8), 1, 1, 2)
        want = -(lat.vocab_logprob.data[0, 0, 1] + lat.blank_logprob.data[0, 1])
        np.testing.assert_allclose(brute_force_transducer(lat, [1]), want, atol=1e-12)

    def test_path_counts(self):
        assert count_transducer_paths(2, 1) == 2
        assert count_transducer_paths(1, 1) == 1
        assert count_transducer_paths(3, 2) == 6


class TestCtcLoss:
    def test_single_frame_single_token(self):
        rows = random_ctc_rows(Rng(9), 1, 3)
        loss = ctc_loss(rows, [2])
        np.testing.assert_allclose(loss.data, -rows.data[0, 2], atol=1e-12)

    def test_repeat_needs_separator(self):
        rows = random_ctc_rows(Rng(10), 2, 3)
        assert ctc_min_frames(TargetSeq([1, 1])) == 3
        with pytest.raises(InfeasibleTargetError):
            ctc_loss(rows, [1, 1])

    def test_empty_target_sums_separator_rows(self):
        rows = random_ctc_rows(Rng(11), 3, 2)
        loss = ctc_loss(rows, [])
        np.testing.assert_allclose(loss.data, -rows.data[:, 2].sum(), atol=1e-12)

    def test_all_mass_on_separator_empty_target(self):
        rows = np.full((3, 4), -60.0)
        rows[:, 3] = 0.0
        np.testing.assert_allclose(ctc_loss(Tensor(rows), []).data, 0.0, atol=1e-12)

    def test_oracle_equivalence_sweep(self):
        rng = Rng(12)
        worst = 0.0
        checked = 0
        for i in range(300):
            T = int(rng.integers(1, 5))
            U = int(rng.integers(1, 4))
            L = int(rng.integers(0, 3))
            target = [int(t) for t in rng.integers(0, U, size=L)]
            rows = random_ctc_rows(rng.child(str(i)), T, U)
            try:
                got = ctc_loss(rows, target).item()
            except InfeasibleTargetError:
                continue
            worst = max(worst, abs(got - brute_force_ctc(rows, target)))
            checked += 1
        assert checked > 150
        assert worst <= 1e-8

    def test_gradient(self):
        raw = Tensor(Rng(13).normal(size=(4, 4)), requires_grad=True)
        assert grad_check(lambda t: ctc_loss(log_softmax(t, axis=-1), [1, 2]), raw) <= 1e-4

    def test_brute_force_budget(self):
        rows = random_ctc_rows(Rng(14), 7, 2)
        with pytest.raises(BudgetError):
            brute_force_ctc(rows, [0])


class TestLmLoss:
    def test_uniform_rows(self):
        rows = Tensor(np.log(np.full((4, 5), 0.2)))
        np.testing.assert_allclose(lm_loss(rows, [0, 1, 2, 3]).data, np.log(5), atol=1e-12)

    def test_one_hot_correct_rows(self):
        target = [2, 0, 1]
        rows = np.full((3, 3), -60.0)
        for i, t in enumerate(target):
            rows[i, t] = 0.0
        np.testing.assert_allclose(lm_loss(Tensor(rows), target).data, 0.0, atol=1e-12)

    def test_matches_direct_average(self):
        rng = Rng(15)
        rows = log_softmax(Tensor(rng.normal(size=(5, 4))), axis=-1)
        target = [int(t) for t in rng.integers(0, 4, size=5)]
        want = -np.mean([rows.data[i, t] for i, t in enumerate(target)])
        np.testing.assert_allclose(lm_loss(rows, target).data, want, atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            lm_loss(Tensor(np.zeros((3, 4))), [0, 1])

    def test_gradient(self):
        raw = Tensor(Rng(16).normal(size=(3, 5)), requires_grad=True)
        assert grad_check(lambda t: lm_loss(log_softmax(t, axis=-1), [0, 4, 2]), raw) <= 1e-4


class TestTotalLoss:
    def test_zero_weights(self):
        out = total_loss(Tensor(np.array(2.5)), Tensor(np.array(9.0)), Tensor(np.array(7.0)), 0.0, 0.0)
        np.testing.assert_allclose(out.data, 2.5)

    def test_reported_ctc_weight(self):
        ones = Tensor(np.array(1.0))
        out = total_loss(ones, ones, ones, 0.1, 0.1)
        np.testing.assert_allclose(out.data, 1.2, atol=1e-12)

    def test_linear_in_lm_weight(self):
        rng = Rng(17)
        lt, ll, lc = (Tensor(np.array(float(rng.random()))) for _ in range(3))
        a = total_loss(lt, ll, lc, 1.0, 0.3).item()
        b = total_loss(lt, ll, lc, 2.0, 0.3).item()
        np.testing.assert_allclose(b - a, ll.item(), atol=1e-12)


class TestKernelPaths:
    def test_jit_and_numpy_paths_agree(self):
        rng = Rng(18)
        blank = np.log(rng.random((5, 4)))
        vy = np.log(rng.random((5, 4)))
        np.testing.assert_allclose(
            _kernels.transducer_alpha(blank, vy), _kernels.transducer_alpha_py(blank, vy), atol=1e-12
        )
        np.testing.assert_allclose(
            _kernels.transducer_beta(blank, vy), _kernels.transducer_beta_py(blank, vy), atol=1e-12
        )
        logp = np.log(rng.random((6, 4)))
        ext = np.array([3, 1, 3, 1, 3], dtype=np.int64)
        np.testing.assert_allclose(_kernels.ctc_alpha(logp, ext), _kernels.ctc_alpha_py(logp, ext), atol=1e-12)
        np.testing.assert_allclose(_kernels.ctc_beta(logp, ext), _kernels.ctc_beta_py(logp, ext), atol=1e-12)

    def test_forward_backward_consistency(self):
        rng = Rng(19)
        blank = np.log(rng.random((4, 3)))
        vy = np.log(rng.random((4, 3)))
        alpha = _kernels.transducer_alpha_py(blank, vy)
        beta = _kernels.transducer_beta_py(blank, vy)
        np.testing.assert_allclose(alpha[-1, -1] + blank[-1, -1], beta[0, 0], atol=1e-10)
