import itertools

import numpy as np
import pytest

from tgattack.attack import (
    AttackConfig, AttackExhausted, Candidate, Flip, SearchTooLarge, TargetLink, apply_flips, cna, fga,
    one_step_attack, ra, target_loss, target_probability, tga_gre, tga_tra, time_aware_gradient,
    time_aware_gradients,
)
from tgattack.ddne import forward_on_tape, init_model, zero_model
from tgattack.diffcomp import Tape
from tgattack.dynnet import DynamicNetwork, NodeHistory, history

from conftest import tiny_hyper
from oracles import central_difference, exhaustive_traversal_optimum, gradient_mismatches

NO_STOP = dict(early_stop=False)


def test_target_loss_examples():
    assert target_loss(1.0) == 0.0
    assert target_loss(0.0) == -1.0
    assert target_loss(0.6) == pytest.approx(-0.16, abs=1e-15)


def test_flip_and_target_validation():
    with pytest.raises(ValueError):
        Flip(0, 1, "toggle")
    with pytest.raises(ValueError):
        TargetLink(2, 2)
    with pytest.raises(ValueError):
        AttackConfig(budget=0)
    with pytest.raises(ValueError):
        AttackConfig(budget=3, random_adds=4)
    assert AttackConfig(budget=3).random_adds == 3
    assert AttackConfig().random_adds == 5


# -- gradients ------------------------------------------------------------------

def probability_gradient(model, rows, j):
    tape = Tape()
    out, xs, _ = forward_on_tape(tape, model, rows[None], input_grad=True)
    grads = tape.gradient_of_input(tape.slice_row(out, j), xs)
    return np.stack([g[:, 0] for g in grads])


def test_gradient_is_scaled_probability_gradient(small_trained):
    net, model = small_trained
    h = history(net, 4, 0, 2)
    for j in (0, 7, 19):
        g = time_aware_gradient(model, h, TargetLink(4, j))
        p = float(target_probability(model, h.rows, j))
        np.testing.assert_allclose(g, 2 * (1 - p) * probability_gradient(model, h.rows, j),
                                   rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences_on_relaxed_history(seed):
    r = np.random.default_rng(seed)
    model = init_model(6, tiny_hyper(), r)
    rows = r.uniform(0.0, 1.0, size=(2, 6))
    j = int(r.integers(6))
    g, _ = time_aware_gradients(model, rows[None], j)
    numeric = central_difference(lambda x: target_loss(float(target_probability(model, x, j))), rows, 1e-5)
    assert gradient_mismatches(g[0], numeric) == []


def test_batched_gradients_match_single_calls(rng):
    model = init_model(6, tiny_hyper(), rng)
    rows = (rng.random((5, 2, 6)) < 0.5).astype(float)
    g, p = time_aware_gradients(model, rows, 2)
    for b in range(5):
        gb, pb = time_aware_gradients(model, rows[b:b + 1], 2)
        np.testing.assert_allclose(g[b], gb[0], rtol=1e-12, atol=1e-16)
        assert p[b] == pytest.approx(pb[0], abs=1e-15)


# -- one-step attack ----------------------------------------------------------------

def three_cell_history():
    # owner is node 3 so all of v = 0, 1, 2 are eligible
    rows = np.zeros((1, 4))
    rows[0, 1] = 1
    return NodeHistory(3, rows), np.array([[0.1, -0.9, 0.3, 5.0]])


def test_one_step_picks_largest_magnitude():
    h, g = three_cell_history()
    (cand,) = one_step_attack(h, g, 0, 1)
    assert cand.flips == (Flip(0, 1, "remove"),)
    assert cand.history.rows[0, 1] == 0
    assert h.rows[0, 1] == 1  # input untouched


def test_one_step_add_only_skips_links():
    h, g = three_cell_history()
    (cand,) = one_step_attack(h, g, 0, 1, add_only=True)
    assert cand.flips == (Flip(0, 2, "add"),)


def test_one_step_respects_touched_cells_and_width():
    h, g = three_cell_history()
    cands = one_step_attack(h, g, 0, 5, touched={(0, 1)})
    assert [c.flips[0].v for c in cands] == [2, 0]
    assert one_step_attack(h, g, 0, 5, touched={(0, 0), (0, 1), (0, 2)}) == []
    with pytest.raises(IndexError):
        one_step_attack(h, g, 1, 1)


def test_one_step_ties_go_to_lower_index():
    h = NodeHistory(0, np.zeros((1, 5)))
    cands = one_step_attack(h, np.full((1, 5), 0.5), 0, 3)
    assert [c.flips[0].v for c in cands] == [1, 2, 3]


# -- crafted fixture ----------------------------------------------------------------

J = 3


def crafted_model(weights=(0.0, 0.0, 4.0, 0.0), bias=-2.0):
    """p_i3 rises with the link to node 3 in the most recent snapshot only."""
    hyper = tiny_hyper(hidden_dim=1, decoder_hidden=())
    model = zero_model(5, hyper)
    model.params["fwd.W_h"][0, J] = 3.0
    model.params["fwd.b_z"][:] = 10.0
    model.params["dec0.W"][J] = weights
    model.params["dec0.b"][J] = bias
    return model


def crafted_history():
    rows = np.zeros((2, 5))
    rows[:, J] = 1
    rows[0, 1] = rows[1, 2] = 1
    return NodeHistory(0, rows)


def all_single_flips(model, h, j):
    out = []
    for k, v in itertools.product(range(h.length), range(h.width)):
        if v == h.node:
            continue
        rows = h.rows.copy()
        rows[k, v] = 1 - rows[k, v]
        out.append((float(target_probability(model, rows, j)), (k, v)))
    return sorted(out)


@pytest.mark.parametrize("weights, bias", [((0.0, 0.0, 4.0, 0.0), -2.0), ((2.0, 0.0, 2.0, 0.0), -2.5)])
def test_greedy_hides_crafted_link_with_one_removal(weights, bias):
    model = crafted_model(weights, bias)
    h = crafted_history()
    assert target_probability(model, h.rows, J) > 0.5
    ex = tga_gre(model, h, TargetLink(0, J))
    assert ex.success and ex.q == 1
    (flip,) = ex.flips
    assert flip.v == J and flip.direction == "remove"
    best_p, best_cell = all_single_flips(model, h, J)[0]
    assert best_p <= 0.5
    assert ex.p_ij == pytest.approx(best_p, abs=1e-12)
    assert (flip.k, flip.v) == best_cell


def test_fga_coincides_with_greedy_when_global_max_is_optimal():
    model = crafted_model()
    h = crafted_history()
    target = TargetLink(0, J)
    g = time_aware_gradient(model, h, target)
    assert np.unravel_index(np.argmax(np.abs(g)), g.shape) == (1, J)
    a, b = fga(model, h, target), tga_gre(model, h, target)
    assert a.flips == b.flips == [Flip(1, J, "remove")]
    assert a.p_ij == pytest.approx(b.p_ij, abs=1e-15)


def test_cna_counts_flips_until_success():
    model = crafted_model()
    h = crafted_history()
    # node 0 links to 2 and 3 in the last snapshot; node 2 has more common neighbours
    A = np.zeros((5, 5), dtype=np.uint8)
    A[0, 2] = A[0, 3] = A[2, 1] = A[2, 4] = A[0, 1] = A[0, 4] = 1
    net = DynamicNetwork(np.stack([A, A, A]))
    ex = cna(model, net, h, TargetLink(0, J), AttackConfig(budget=6, random_adds=3))
    assert ex.flips == [Flip(1, 2, "remove"), Flip(1, 1, "add"), Flip(1, 3, "remove")]
    assert ex.success and ex.q == 3


# -- greedy / traversal properties ------------------------------------------------------

def random_instance(seed, n=6):
    r = np.random.default_rng(seed)
    model = init_model(n, tiny_hyper(), r)
    node = int(r.integers(n))
    j = int(r.choice([v for v in range(n) if v != node]))
    rows = (r.random((2, n)) < 0.5).astype(float)
    rows[:, node] = 0
    return model, NodeHistory(node, rows), TargetLink(node, j)


@pytest.mark.parametrize("seed", range(8))
def test_greedy_keeps_the_best_sibling(seed):
    model, h, target = random_instance(seed)
    ex = tga_gre(model, h, target, AttackConfig(budget=4, **NO_STOP))
    assert len(ex.trace) == 4 and len(ex.flips) == 4
    cur = h.copy()
    for flip, siblings in zip(ex.flips, ex.trace):
        cur = apply_flips(cur, [flip])
        p = float(target_probability(model, cur.rows, target.j))
        assert p == pytest.approx(min(siblings), abs=1e-12)
        assert len(siblings) <= h.length


@pytest.mark.parametrize("seed", range(8))
def test_gradient_evaluation_counts(seed):
    model, h, target = random_instance(seed)
    for budget in (1, 3, 6):
        cfg = AttackConfig(budget=budget, **NO_STOP)
        assert tga_gre(model, h, target, cfg).gradient_evals == budget
        assert fga(model, h, target, cfg).gradient_evals <= budget
        assert tga_gre(model, h, target, cfg).gradient_evals <= budget * h.length


@pytest.mark.parametrize("seed", range(8))
def test_traversal_depth_one_matches_greedy(seed):
    model, h, target = random_instance(seed)
    cfg = AttackConfig(budget=1, candidate_width=1, **NO_STOP)
    assert tga_tra(model, h, target, cfg).flips == tga_gre(model, h, target, cfg).flips


@pytest.mark.parametrize("seed", range(12))
def test_traversal_never_worse_than_greedy(seed):
    model, h, target = random_instance(seed)
    for budget in (1, 2, 3):
        cfg = AttackConfig(budget=budget, candidate_width=1 + seed % 2, **NO_STOP)
        assert tga_tra(model, h, target, cfg).p_ij <= tga_gre(model, h, target, cfg).p_ij + 1e-12


@pytest.mark.parametrize("seed", range(6))
def test_traversal_matches_exhaustive_search(seed):
    model, h, target = random_instance(100 + seed)
    add_only = seed % 3 == 2
    cfg = AttackConfig(budget=2, candidate_width=2, add_only=add_only, **NO_STOP)
    ex = tga_tra(model, h, target, cfg)
    best, _ = exhaustive_traversal_optimum(model, h.rows, h.node, target.j, 2, 2, add_only)
    assert abs(ex.p_ij - best) <= 1e-12


def test_traversal_size_cap_and_beam():
    model, h, target = random_instance(3)
    with pytest.raises(SearchTooLarge, match="beam_width"):
        tga_tra(model, h, target, AttackConfig(budget=3, candidate_width=3, max_candidates=50, **NO_STOP))
    ex = tga_tra(model, h, target, AttackConfig(budget=3, candidate_width=3, beam_width=4, **NO_STOP))
    assert len(ex.flips) == 3


def test_early_stop_returns_at_first_success():
    model = crafted_model()
    h = crafted_history()
    for attack in (tga_gre, tga_tra, fga):
        ex = attack(model, h, TargetLink(0, J), AttackConfig(budget=5))
        assert ex.success and len(ex.flips) == 1


def test_already_hidden_target_needs_no_flips():
    model = crafted_model()
    h = crafted_history()
    h.rows[1, J] = 0
    for attack in (tga_gre, tga_tra, fga):
        ex = attack(model, h, TargetLink(0, J))
        assert ex.success and ex.flips == [] and ex.q == 0


def test_exhaustion_carries_best_example():
    model = init_model(3, tiny_hyper(), np.random.default_rng(0))
    h = NodeHistory(0, np.array([[0, 1, 1], [0, 1, 1]], dtype=float))
    cfg = AttackConfig(budget=2, add_only=True, **NO_STOP)
    for attack in (tga_gre, tga_tra, fga):
        with pytest.raises(AttackExhausted) as info:
            attack(model, h, TargetLink(0, 1), cfg)
        assert info.value.example.exhausted and info.value.example.flips == []


# -- every method ---------------------------------------------------------------------

def never_hidden_model(n=6, j=2):
    model = zero_model(n, tiny_hyper())
    model.params["dec1.b"][j] = 6.0
    return model


def run_all(model, net, h, target, cfg):
    return [tga_gre(model, h, target, cfg), tga_tra(model, h, target, cfg), fga(model, h, target, cfg),
            cna(model, net, h, target, cfg), ra(model, net, h, target, cfg, np.random.default_rng(1))]


@pytest.mark.parametrize("add_only", [False, True])
def test_examples_are_valid(small_trained, add_only):
    net, model = small_trained
    cfg = AttackConfig(budget=4, candidate_width=2, add_only=add_only)
    for i, j in [(0, 1), (5, 9), (11, 3)]:
        h = history(net, i, 0, 2)
        for ex in run_all(model, net, h, TargetLink(i, j), cfg):
            assert len(ex.flips) <= cfg.budget
            cells = [(f.k, f.v) for f in ex.flips]
            assert len(set(cells)) == len(cells)
            assert all(v != i for _, v in cells)
            np.testing.assert_array_equal(apply_flips(h, ex.flips).rows, ex.base.rows)
            if add_only:
                assert all(f.direction == "add" for f in ex.flips)
            assert ex.q == (len(ex.flips) if ex.success else cfg.budget)


def test_cna_order_and_tie_rule():
    model = never_hidden_model()
    net = DynamicNetwork(np.zeros((3, 6, 6), dtype=np.uint8))
    rows = np.zeros((2, 6))
    rows[1, [1, 4, 5]] = 1
    h = NodeHistory(0, rows)
    ex = cna(model, net, h, TargetLink(0, 2), AttackConfig(budget=4, random_adds=2))
    assert not ex.success and ex.q == 4
    # all common-neighbour counts are 0: both lists run by ascending index
    assert ex.flips == [Flip(1, 1, "remove"), Flip(1, 2, "add"), Flip(1, 4, "remove"), Flip(1, 3, "add")]


def test_cna_flags_exhaustion():
    model = never_hidden_model()
    net = DynamicNetwork(np.zeros((3, 6, 6), dtype=np.uint8))
    rows = np.zeros((2, 6))
    rows[1, 1] = 1
    ex = cna(model, net, NodeHistory(0, rows), TargetLink(0, 2), AttackConfig(budget=6, random_adds=2))
    assert ex.exhausted
    assert [f.direction for f in ex.flips] == ["remove", "add", "add"]


def test_ra_is_seeded_and_respects_constraints():
    model = never_hidden_model(n=8)
    r = np.random.default_rng(0)
    rows = (r.random((2, 8)) < 0.5).astype(float)
    rows[:, 3] = 0
    h = NodeHistory(3, rows)
    cfg = AttackConfig(budget=6, random_adds=4)
    a = ra(model, None, h, TargetLink(3, 2), cfg, np.random.default_rng(42))
    b = ra(model, None, h, TargetLink(3, 2), cfg, np.random.default_rng(42))
    assert a.flips == b.flips
    assert sum(f.direction == "add" for f in a.flips) == 4
    assert sum(f.direction == "remove" for f in a.flips) == 2
    assert all(f.v != 3 for f in a.flips)
    assert {f.k for f in a.flips} <= {0, 1}
    c = ra(model, None, h, TargetLink(3, 2), cfg, np.random.default_rng(43))
    assert c.flips != a.flips


def test_candidate_touched_cells():
    h = NodeHistory(0, np.zeros((2, 3)))
    c = Candidate(h, (Flip(0, 1, "add"), Flip(1, 2, "add")))
    assert c.touched == {(0, 1), (1, 2)}


def test_apply_flips_checks_directions():
    h = NodeHistory(0, np.array([[0.0, 1.0, 0.0]]))
    assert apply_flips(h, [Flip(0, 1, "remove"), Flip(0, 2, "add")]).rows.tolist() == [[0, 0, 1]]
    with pytest.raises(ValueError):
        apply_flips(h, [Flip(0, 1, "add")])
    with pytest.raises(ValueError):
        apply_flips(h, [Flip(0, 0, "add")])
