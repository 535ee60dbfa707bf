import itertools

import numpy as np
import pytest

from letfmm.fmmcore import (
    LetIncompleteError,
    TraversalConfig,
    build_tree,
    direct_sum,
    evaluate,
    traverse,
    upward_pass,
)
from letfmm.fmmcore import expansions as ex
from letfmm.space import Box3, Distribution, DistKind, Particles, generate


def _tree(particles, cfg):
    return upward_pass(build_tree(particles, Box3.around(particles.pos), cfg))


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


# -- expansions ---------------------------------------------------------------


def test_n_terms():
    assert [ex.n_terms(p) for p in (1, 2, 3, 4, 6)] == [1, 4, 10, 20, 56]


def test_derivative_tensor_against_symbolic():
    # frozen from symbolic differentiation of 1/|r| at r = (0.3, -0.7, 1.1)
    expected = {
        (0, 0, 0): 0.7474350927519359,
        (1, 0, 0): -0.12526845129920713,
        (0, 1, 1): -0.5388642877116732,
        (2, 0, 1): 0.2881397228785483,
        (1, 1, 1): 0.4515622522723518,
        (0, 0, 3): -0.048740052626222094,
        (3, 1, 0): 0.18117530690460026,
        (2, 2, 0): -0.024211311356690704,
    }
    T = ex.derivative_tensor(np.array([0.3, -0.7, 1.1]), 5)[0]
    tab = ex.tables(5)
    for a, v in expected.items():
        assert T[tab.pos[a]] == pytest.approx(v, rel=1e-12)


def test_single_particle_at_center_moments():
    M = ex.p2m(np.array([[0.2, 0.3, 0.4]]), np.array([1.0]), np.array([0.2, 0.3, 0.4]), 4)
    assert M[0] == 1.0 and np.all(M[1:] == 0.0)


def test_far_field_two_particles():
    pos = np.array([[0.5, 0.0, 0.0], [-0.5, 0.0, 0.0]])
    M = ex.p2m(pos, np.ones(2), np.zeros(3), 4)
    phi = ex.m2p(M, np.zeros(3), np.array([[10.0, 0, 0]]), 4)[0]
    exact = 1 / 9.5 + 1 / 10.5
    # cell radius 0.5 at distance 10: truncation ~ (0.05)^4
    assert abs(phi - exact) / exact < (0.5 / 10) ** 4


def test_convergence_in_p():
    rng = np.random.default_rng(3)
    pos = rng.uniform(-0.5, 0.5, (50, 3))
    q = rng.uniform(0.1, 1.0, 50)
    x = np.array([[2.0, 1.5, -1.0]])
    exact = np.sum(q / np.linalg.norm(x - pos, axis=1))
    errs = [abs(ex.m2p(ex.p2m(pos, q, np.zeros(3), p), np.zeros(3), x, p)[0] - exact) for p in (2, 4, 6)]
    assert errs[2] <= errs[1] <= errs[0]


def test_m2m_exact_shift():
    rng = np.random.default_rng(4)
    pos = rng.uniform(-0.2, 0.2, (30, 3))
    q = rng.uniform(-1, 1, 30)
    c_child, c_parent = np.array([0.05, -0.02, 0.01]), np.array([0.3, 0.1, -0.2])
    p = 5
    shifted = ex.m2m(ex.p2m(pos, q, c_child, p), c_child - c_parent, p)[0]
    direct = ex.p2m(pos, q, c_parent, p)
    assert np.allclose(shifted, direct, rtol=1e-12, atol=1e-14)
    x = np.array([[4.0, 3.0, 2.0]])
    assert ex.m2p(shifted, c_parent, x, p)[0] == pytest.approx(ex.m2p(direct, c_parent, x, p)[0], rel=1e-12)


def test_m2l_l2l_l2p_chain():
    rng = np.random.default_rng(5)
    src = rng.uniform(-0.3, 0.3, (40, 3)) + np.array([5.0, 0, 0])
    q = rng.uniform(0.1, 1.0, 40)
    cs = np.array([5.0, 0, 0])
    ct = np.zeros(3)
    p = 6
    L = ex.m2l(ex.p2m(src, q, cs, p), ct - cs, p)
    child = np.array([0.1, -0.1, 0.05])
    Lc = ex.l2l(L, child - ct, p)
    x = np.array([[0.12, -0.08, 0.03]])
    exact = np.sum(q / np.linalg.norm(x - src, axis=1))
    assert ex.l2p(Lc[0], child, x, p)[0] == pytest.approx(exact, rel=1e-5)
    phi, g = ex.l2p(Lc[0], child, x, p, gradient=True)
    exact_g = -np.sum(q[:, None] * (x - src) / np.linalg.norm(x - src, axis=1)[:, None] ** 3, axis=0)
    assert np.allclose(g[0], exact_g, rtol=1e-3)


# -- tree ---------------------------------------------------------------------


def test_single_particle_tree():
    t = build_tree(Particles([[0.1, 0.2, 0.3]], [1.0]), Box3([0, 0, 0], [1, 1, 1]), TraversalConfig())
    assert t.ncells == 1 and t.is_leaf(0)
    assert np.array_equal(t.lo[0], t.hi[0]) and t.radius[0] == 0.0


def test_octant_centers_split_once():
    pts = np.array([[0.25 + 0.5 * i, 0.25 + 0.5 * j, 0.25 + 0.5 * k] for i, j, k in itertools.product(range(2), repeat=3)])
    t = build_tree(Particles(pts, np.ones(8)), Box3([0, 0, 0], [1, 1, 1]), TraversalConfig(n_leaf=1))
    assert t.ncells == 9 and t.nchild[0] == 8 and np.all(t.nchild[1:] == 0)


def test_structural_audit_uniform():
    p = generate(Distribution(DistKind.UNIFORM_CUBE, 4096, 2))
    t = build_tree(p, Box3.around(p.pos), TraversalConfig(n_leaf=64))
    leaves = t.leaves()
    assert np.all(t.count[leaves] <= 64)
    for i in range(t.ncells):
        ch = list(t.children(i))
        if ch:
            assert t.start[ch[0]] == t.start[i]
            assert sum(t.count[c] for c in ch) == t.count[i]
            assert all(t.start[a] + t.count[a] == t.start[b] for a, b in zip(ch, ch[1:]))
        seg = t.pos[t.start[i]:t.start[i] + t.count[i]]
        assert np.array_equal(seg.min(axis=0), t.lo[i]) and np.array_equal(seg.max(axis=0), t.hi[i])
    assert np.array_equal(t.pos, p.pos[t.perm])


def test_coincident_particles_exceed_leaf_at_depth_cap():
    pts = np.zeros((10, 3))
    t = build_tree(Particles(pts, np.ones(10)), Box3([0, 0, 0], [1, 1, 1]), TraversalConfig(n_leaf=2))
    assert t.ncells == 1 and t.count[0] == 10


def test_build_tree_rejects_bad_input():
    cfg = TraversalConfig()
    with pytest.raises(ValueError):
        build_tree(Particles(np.zeros((0, 3)), np.zeros(0)), Box3([0, 0, 0], [1, 1, 1]), cfg)
    with pytest.raises(ValueError):
        build_tree(Particles([[2.0, 0, 0]], [1.0]), Box3([0, 0, 0], [1, 1, 1]), cfg)


@pytest.mark.parametrize("kw", [dict(theta=0.0), dict(theta=1.0), dict(n_leaf=0), dict(p=0)])
def test_traversal_config_validation(kw):
    with pytest.raises(ValueError):
        TraversalConfig(**kw)


def test_charge_conservation_every_level():
    p = generate(Distribution(DistKind.SPHERE_SURFACE, 3000, 1))
    t = _tree(p, TraversalConfig(n_leaf=16))
    total = p.q.sum()
    assert abs(t.M[0, 0] - total) / total <= 1e-14
    for lev in range(1, int(t.level.max()) + 1):
        cells = np.flatnonzero(t.level == lev)
        # cells at this level plus shallower leaves partition the particles
        shallow_leaves = np.flatnonzero((t.level < lev) & (t.nchild == 0))
        s = t.M[cells, 0].sum() + t.M[shallow_leaves, 0].sum()
        assert abs(s - total) / total <= 1e-14


def test_two_particles_monopole():
    t = _tree(Particles([[0, 0, 0], [1, 1, 1]], [0.5, 0.5]), TraversalConfig())
    assert t.M[0, 0] == 1.0


# -- evaluation ---------------------------------------------------------------


def test_two_separated_cells():
    src = Particles([[0, 0, 0]], [1.0], ids=[0])
    tgt = Particles([[10, 0, 0]], [1.0], ids=[1])
    cfg = TraversalConfig()
    ts, tt = _tree(src, cfg), _tree(tgt, cfg)
    res = evaluate(tt, ts, cfg)
    assert res.interactions.n_m2l == 1
    assert abs(res.phi[0] - 0.1) / 0.1 <= 1e-4


def test_tiny_theta_equals_direct():
    p = generate(Distribution(DistKind.UNIFORM_CUBE, 600, 9))
    cfg = TraversalConfig(theta=1e-9, n_leaf=32)
    t = _tree(p, cfg)
    res = evaluate(t, t, cfg)
    ref, _, _ = direct_sum(p, p)
    assert res.interactions.n_m2l == 0
    assert np.allclose(res.phi, ref, rtol=1e-12, atol=0)


def test_accuracy_sphere_moderate():
    p = generate(Distribution(DistKind.SPHERE_SURFACE, 3000, 11))
    cfg = TraversalConfig()
    t = _tree(p, cfg)
    res = evaluate(t, t, cfg, gradient=True)
    ref, gref, _ = direct_sum(p, p, gradient=True)
    assert _rel(res.phi, ref) <= 1e-3
    assert _rel(res.grad, gref) <= 1e-2


def test_theta_monotonicity():
    p = generate(Distribution(DistKind.SPHERE_SURFACE, 2000, 5))
    ref, _, _ = direct_sum(p, p)
    errs = []
    for theta in (0.8, 0.6, 0.4, 0.2):
        cfg = TraversalConfig(theta=theta, n_leaf=32)
        t = _tree(p, cfg)
        errs.append(_rel(evaluate(t, t, cfg).phi, ref))
    assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_traversal_pair_accounting():
    p = generate(Distribution(DistKind.UNIFORM_CUBE, 512, 6))
    cfg = TraversalConfig(n_leaf=8)
    t = _tree(p, cfg)
    inter = traverse(t, [t], cfg.theta)
    leaf_of = np.empty(t.nparticles, dtype=np.int64)
    for c in t.leaves():
        leaf_of[t.start[c]:t.start[c] + t.count[c]] = c
    cover = np.zeros((t.nparticles, t.nparticles), dtype=np.int64)

    def span(c):
        return slice(t.start[c], t.start[c] + t.count[c])

    for a, b in zip(inter.m2l_target, inter.m2l_source):
        cover[span(a), span(b)] += 1
    for a, b in zip(inter.p2p_target, inter.p2p_source):
        cover[span(a), span(b)] += 1
    assert np.all(cover == 1)


def test_coincident_pairs_counted():
    pts = np.array([[0, 0, 0], [0, 0, 0], [1, 0, 0]], dtype=float)
    p = Particles(pts, np.ones(3))
    phi, _, coincident = direct_sum(p, p)
    assert coincident == 2
    assert phi[0] == pytest.approx(1.0) and phi[2] == pytest.approx(2.0)
    cfg = TraversalConfig()
    t = _tree(p, cfg)
    res = evaluate(t, t, cfg)
    assert res.coincident == 2 and np.allclose(res.phi, phi)


def test_direct_sum_examples():
    two = Particles([[0, 0, 0], [1, 0, 0]], [1.0, 1.0])
    assert np.allclose(direct_sum(two, two)[0], 1.0)
    corners = np.array(list(itertools.product((0.0, 1.0), repeat=3)))
    cube = Particles(corners, np.ones(8))
    phi = direct_sum(cube, cube)[0]
    assert np.allclose(phi, phi[0], rtol=1e-14)


def test_energy_symmetry_under_role_swap():
    rng = np.random.default_rng(8)
    a = Particles(rng.random((40, 3)), rng.uniform(-1, 1, 40), ids=np.arange(40))
    b = Particles(rng.random((30, 3)) + 2, rng.uniform(-1, 1, 30), ids=np.arange(40, 70))
    e_ab = np.dot(a.q, direct_sum(a, b)[0])
    e_ba = np.dot(b.q, direct_sum(b, a)[0])
    assert e_ab == pytest.approx(e_ba, rel=1e-13)


def test_multipole_only_leaf_failing_mac_raises():
    cfg = TraversalConfig()
    src = _tree(generate(Distribution(DistKind.UNIFORM_CUBE, 10, 1)), cfg)
    src.payload = np.zeros_like(src.payload)
    tgt = _tree(Particles([[0.5, 0.5, 0.5]], [1.0], ids=[99]), cfg)
    with pytest.raises(LetIncompleteError):
        evaluate(tgt, src, cfg)
