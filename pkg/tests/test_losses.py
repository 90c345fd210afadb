"""Loss tests. The CTC reference is exhaustive path enumeration: sum the
probability of every frame labelling that collapses to the target."""

import itertools

import numpy as np
import pytest

import condspeech.autodiff as ad
import condspeech.losses as ls
from condspeech.autodiff import ShapeError, Tensor


def collapse(path):
    out, prev = [], -1
    for p in path:
        if p != prev and p != ls.BLANK:
            out.append(p)
        prev = p
    return out


def brute_force_ctc(log_post: np.ndarray, target: list[int]) -> float:
    """-log sum of path probabilities over every frame labelling."""
    v, t = log_post.shape
    total = -np.inf
    for path in itertools.product(range(v), repeat=t):
        if collapse(path) == list(target):
            total = np.logaddexp(total, sum(log_post[p, i] for i, p in enumerate(path)))
    return -total


def rand_log_post(rng, v, t):
    x = rng.normal(size=(v, t))
    return x - np.log(np.exp(x).sum(axis=0, keepdims=True))


# -- CTC forward -----------------------------------------------------------------


@pytest.mark.parametrize(
    "v,t,target",
    [
        (3, 3, [1]),
        (3, 4, [1, 2]),
        (3, 5, [1, 1]),
        (4, 5, [1, 2, 3]),
        (4, 6, [2, 2, 1]),
        (2, 6, [1, 1, 1]),
        (4, 4, []),
    ],
)
def test_ctc_matches_path_enumeration(rng, v, t, target):
    lp = rand_log_post(rng, v, t)
    got = ls.ctc_loss(Tensor(lp), target).item()
    assert got == pytest.approx(brute_force_ctc(lp, target), abs=1e-9)


def test_ctc_certain_path_has_zero_loss():
    # log-posteriors that put probability 1 on blank,1,blank: only target [1]
    lp = np.full((3, 3), -1e9)
    lp[0, 0] = lp[1, 1] = lp[0, 2] = 0.0
    assert ls.ctc_loss(Tensor(lp), [1]).item() == pytest.approx(0.0, abs=1e-6)


def test_ctc_uniform_posteriors_closed_form():
    # with uniform frame posteriors every path has probability v^-t, so the
    # loss is t*log(v) - log(#paths that collapse to the target)
    v, t, target = 3, 4, [1, 2]
    lp = np.full((v, t), -np.log(v))
    n_paths = sum(
        1 for path in itertools.product(range(v), repeat=t) if collapse(path) == target
    )
    want = t * np.log(v) - np.log(n_paths)
    assert ls.ctc_loss(Tensor(lp), target).item() == pytest.approx(want, rel=1e-12)


# -- CTC gradient -----------------------------------------------------------------


def test_ctc_gradient_matches_finite_differences(rng):
    lp = Tensor(rand_log_post(rng, 4, 6), requires_grad=True)
    rep = ad.grad_check(lambda: ls.ctc_loss(lp, [1, 3, 3]), [("log_post", lp)])
    assert rep.ok, rep.summary()


def test_ctc_gradient_is_negative_state_posterior(rng):
    # occupancy check: summing -grad over the vocabulary gives 1 per frame,
    # because exactly one CTC state is occupied at each time step
    lp = Tensor(rand_log_post(rng, 4, 5), requires_grad=True)
    ls.ctc_loss(lp, [2, 1]).backward()
    np.testing.assert_allclose(-lp.grad.sum(axis=0), np.ones(5), rtol=1e-9)


# -- CTC input validation ------------------------------------------------------------


def test_ctc_infeasible_alignments(rng):
    lp = Tensor(rand_log_post(rng, 4, 2))
    with pytest.raises(ls.InfeasibleAlignmentError):
        ls.ctc_loss(lp, [1, 2, 3])
    with pytest.raises(ls.InfeasibleAlignmentError):
        ls.ctc_loss(lp, [1, 1])  # repeat needs a separating blank: 3 frames


def test_ctc_rejects_blank_and_oov_tokens(rng):
    lp = Tensor(rand_log_post(rng, 4, 6))
    with pytest.raises(ValueError):
        ls.ctc_loss(lp, [0, 1])
    with pytest.raises(ValueError):
        ls.ctc_loss(lp, [4])
    with pytest.raises(ShapeError):
        ls.ctc_loss(Tensor(np.zeros(4)), [1])


@pytest.mark.parametrize(
    "target,want",
    [([], 0), ([1], 1), ([1, 2], 2), ([1, 1], 3), ([1, 1, 1], 5), ([1, 2, 2, 3], 5)],
)
def test_min_frames_needed(target, want):
    assert ls.min_frames_needed(target) == want


def test_min_frames_is_exact_feasibility_threshold(rng):
    # t = need aligns, t = need-1 raises, for a target with a repeat
    target = [2, 2, 1]
    need = ls.min_frames_needed(target)
    lp = rand_log_post(rng, 4, need)
    assert np.isfinite(ls.ctc_loss(Tensor(lp), target).item())
    with pytest.raises(ls.InfeasibleAlignmentError):
        ls.ctc_loss(Tensor(lp[:, : need - 1]), target)


# -- greedy decoding ----------------------------------------------------------------


def test_greedy_decode_collapses_and_drops_blanks():
    lp = np.full((4, 7), -10.0)
    frames = [1, 1, 0, 2, 2, 0, 1]
    for t, tok in enumerate(frames):
        lp[tok, t] = 0.0
    assert ls.ctc_greedy_decode(lp) == [1, 2, 1]


def test_greedy_decode_tie_picks_lowest_index():
    lp = np.zeros((3, 2))  # all tied: argmax must take index 0 = blank
    assert ls.ctc_greedy_decode(lp) == []
    lp2 = np.zeros((3, 1))
    lp2[1:, 0] = 1.0  # rows 1 and 2 tied above blank
    assert ls.ctc_greedy_decode(lp2) == [1]


def test_greedy_decode_accepts_tensor_and_checks_rank(rng):
    lp = rand_log_post(rng, 3, 4)
    assert ls.ctc_greedy_decode(Tensor(lp)) == ls.ctc_greedy_decode(lp)
    with pytest.raises(ShapeError):
        ls.ctc_greedy_decode(np.zeros(3))


# -- multitask masking ----------------------------------------------------------------


def sq_loss(out, label):
    return (out - Tensor(np.asarray(float(label)))) * (out - Tensor(np.asarray(float(label))))


def test_multitask_loss_weighted_mean(rng):
    a = Tensor(np.asarray(2.0), requires_grad=True)
    b = Tensor(np.asarray(5.0), requires_grad=True)
    batch = [
        ({"x": a, "y": b}, {"x": 1, "y": 3}),
        ({"x": a}, {"x": 0, "y": None}),
    ]
    fns = {"x": sq_loss, "y": sq_loss}
    got = ls.multitask_loss(batch, {"x": 0.5, "y": 2.0}, fns)
    want = (0.5 * (2 - 1) ** 2 + 2.0 * (5 - 3) ** 2 + 0.5 * (2 - 0) ** 2) / 2
    assert got.item() == pytest.approx(want, rel=1e-6)


def test_multitask_loss_masked_label_contributes_no_gradient():
    a = Tensor(np.asarray(2.0), requires_grad=True)
    b = Tensor(np.asarray(5.0), requires_grad=True)
    calls = []

    def spy(out, label):
        calls.append(label)
        return sq_loss(out, label)

    batch = [({"x": a, "y": b}, {"x": 1, "y": None})]
    ls.multitask_loss(batch, {}, {"x": spy, "y": spy}).backward()
    assert calls == [1]
    assert b.grad is None


def test_multitask_loss_errors():
    with pytest.raises(ValueError):
        ls.multitask_loss([], {}, {})
    a = Tensor(np.asarray(1.0), requires_grad=True)
    with pytest.raises(ValueError):
        ls.multitask_loss([({"x": a}, {"x": None})], {}, {"x": sq_loss})


def test_multitask_loss_default_weight_is_one():
    a = Tensor(np.asarray(3.0), requires_grad=True)
    got = ls.multitask_loss([({"x": a}, {"x": 1})], {}, {"x": sq_loss})
    assert got.item() == pytest.approx(4.0, rel=1e-6)
