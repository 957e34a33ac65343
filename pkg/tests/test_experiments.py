import csv
import io
import itertools

import numpy as np
import pytest
from scipy import stats

from naisnet.dynamics import Activation
from naisnet.experiments import (
    ALL_VARIANTS,
    ModelSettings,
    ScalarMapSpec,
    ablation_grid,
    depth_statistics,
    depth_survey,
    kruskal_wallis,
    map_slopes,
    parse_variant,
    scalar_map,
    variant_name,
    write_ablation_table,
    write_depth_csv,
    write_loss_by_depth,
    write_scalar_map_csv,
)
from naisnet.training import TrainConfig, init_model, make_blobs


# -- scalar maps ----------------------------------------------------------------

def test_stable_tanh_asymptotic_slope():
    rows = scalar_map(ScalarMapSpec(A=-0.5, unroll_lengths=(200,), u_grid=(-0.2, 0.2, 41)))
    slopes = map_slopes(rows, 200)
    assert np.all(np.abs(slopes - 2.0) <= 0.02)


def test_unstable_relu_gain():
    rows = scalar_map(ScalarMapSpec(A=1.0, activation=Activation.RELU, unroll_lengths=(100,),
                                    u_grid=(0.5, 1.0, 3)))
    gain = [r.x / r.u for r in rows]
    assert gain == pytest.approx([2.0 ** 100 - 1] * 3, rel=1e-12)
    assert 1.27e30 / 2 <= gain[0] <= 1.27e30 * 2


@pytest.mark.parametrize("A", [-2.0, -2.5, -7.0])
def test_strongly_negative_relu_is_max_u_zero(A):
    spec = ScalarMapSpec(A=A, activation=Activation.RELU, unroll_lengths=(1, 5, 30, 100))
    for r in scalar_map(spec):
        assert r.x == max(r.u, 0.0)


def test_stable_tanh_maps_are_lipschitz():
    for A in (-0.05, -0.3, -0.5, -0.95):
        rows = scalar_map(ScalarMapSpec(A=A, unroll_lengths=(1, 5, 10, 30, 100)))
        for K in (1, 5, 10, 30, 100):
            assert np.max(np.abs(map_slopes(rows, K))) <= abs(1.0 / A) + 1e-6


def test_adaptive_map_jumps_only_where_depth_changes():
    spec = ScalarMapSpec(A=-0.5, unroll_lengths=(100,), stop_threshold=0.95, u_grid=(-2, 2, 401))
    rows = sorted(scalar_map(spec), key=lambda r: r.u)
    jumps = 0
    for a, b in zip(rows, rows[1:]):
        slope = abs(b.x - a.x) / (b.u - a.u)
        if a.depth == b.depth:
            assert slope <= 2.0 + 1e-6
        else:
            jumps += 1
    assert jumps > 0
    assert all(r.converged for r in rows)


def test_scalar_map_csv_layout():
    buf = io.StringIO()
    rows = scalar_map(ScalarMapSpec(A=-0.5, unroll_lengths=(1, 2), u_grid=(0, 1, 3)))
    write_scalar_map_csv(rows, buf)
    lines = list(csv.reader(io.StringIO(buf.getvalue())))
    assert lines[0] == ["u", "K", "x_K", "depth", "converged"]
    assert len(lines) == 1 + 6
    assert float(lines[-1][2]) == rows[-1].x


def test_scalar_map_spec_validation():
    with pytest.raises(ValueError):
        ScalarMapSpec(A=-0.5, u_grid=(0, 1, 1))


# -- Kruskal-Wallis -------------------------------------------------------------------

def brute_force_kw(groups):
    pooled = [v for g in groups for v in g]
    N = len(pooled)

    def rank(v):
        less = sum(w < v for w in pooled)
        equal = sum(w == v for w in pooled)
        return less + (equal + 1) / 2

    H = 12 / (N * (N + 1)) * sum(sum(rank(v) for v in g) ** 2 / len(g) for g in groups) - 3 * (N + 1)
    ties = sum(t ** 3 - t for t in (pooled.count(v) for v in set(pooled)))
    return H / (1 - ties / (N ** 3 - N))


def test_kruskal_wallis_hand_example():
    H, p = kruskal_wallis([[1, 2, 3], [4, 5, 6]])
    assert abs(H - 27 / 7) <= 1e-12
    assert p == pytest.approx(stats.chi2.sf(27 / 7, 1), rel=1e-12)


def test_kruskal_wallis_identical_groups():
    assert kruskal_wallis([[1, 2, 3], [1, 2, 3]]) == (0.0, 1.0)
    assert kruskal_wallis([[4, 4], [4, 4, 4]]) == (0.0, 1.0)


def test_kruskal_wallis_ties_brute_force():
    H, _ = kruskal_wallis([[1, 1, 2], [2, 3, 3]])
    assert H == pytest.approx(brute_force_kw([[1, 1, 2], [2, 3, 3]]), abs=1e-12)


def test_kruskal_wallis_exhaustive_small_cases():
    # every split of a small tied multiset into two or three nonempty groups
    values = [1, 1, 2, 2, 2, 3]
    seen = 0
    for labels in itertools.product(range(3), repeat=len(values)):
        groups = [[v for v, l in zip(values, labels) if l == g] for g in range(3)]
        groups = [g for g in groups if g]
        if len(groups) < 2:
            continue
        H, p = kruskal_wallis(groups)
        assert H == pytest.approx(brute_force_kw(groups), abs=1e-12)
        ref = stats.kruskal(*groups)
        assert H == pytest.approx(ref.statistic, abs=1e-12)
        assert p == pytest.approx(ref.pvalue, abs=1e-12)
        seen += 1
    assert seen > 500


def test_kruskal_wallis_invariances(rng):
    groups = [rng.normal(size=5).round(1).tolist(), rng.normal(1, size=7).round(1).tolist(),
              rng.normal(size=4).round(1).tolist()]
    H, p = kruskal_wallis(groups)
    for perm in itertools.permutations(groups):
        assert kruskal_wallis(list(perm))[0] == pytest.approx(H, abs=1e-12)
    mono = [[np.exp(v) * 3 + 1 for v in g] for g in groups]
    assert kruskal_wallis(mono)[0] == pytest.approx(H, abs=1e-12)


def test_kruskal_wallis_errors():
    with pytest.raises(ValueError):
        kruskal_wallis([[1, 2, 3]])
    with pytest.raises(ValueError):
        kruskal_wallis([[1], []])


# -- depth survey -----------------------------------------------------------------------

def scalar_model(A=-0.5, B=1.0):
    model = init_model(1, 1, 2, K=1, stable=False, seed=0)
    layer = model.blocks[0].layers[0]
    layer.R[...] = np.sqrt(-A - layer.eps)
    layer.B[...] = B
    return model


def test_depth_survey_immediate_convergence():
    model = init_model(3, 4, 2, K=5, seed=0)
    model.blocks[0].layers[0].B[...] = 0.0
    recs = depth_survey(model, np.ones((6, 3)), np.arange(6) % 2, threshold=1e-4, k_max=50)
    assert [r.depth for r in recs] == [(1,)] * 6
    assert all(r.converged for r in recs)


def test_depth_survey_deterministic(rng):
    model = init_model(3, 4, 2, K=5, seed=0)
    X = np.repeat(rng.normal(size=(1, 3)), 5, axis=0)
    recs = depth_survey(model, X, np.zeros(5, dtype=int), threshold=1e-4, k_max=200)
    assert len({r.depth for r in recs}) == 1
    again = depth_survey(model, X, np.zeros(5, dtype=int), threshold=1e-4, k_max=200, batch_size=2)
    assert [r.depth for r in again] == [r.depth for r in recs]


def test_depth_differs_between_separated_classes(rng):
    model = scalar_model()
    near = rng.uniform(0.001, 0.01, size=(40, 1))
    far = rng.uniform(1.0, 2.0, size=(40, 1))
    X = np.concatenate([near, far])
    y = np.repeat([0, 1], 40)
    recs = depth_survey(model, X, y, threshold=1e-4, k_max=500)
    st = depth_statistics(recs)
    assert st.p < 0.05 and st.fraction_different == 1.0
    assert np.mean([r.depth[0] for r in recs[40:]]) > np.mean([r.depth[0] for r in recs[:40]])
    buf = io.StringIO()
    write_depth_csv(recs, buf)
    assert buf.getvalue().splitlines()[0] == "sample_id,class_label,depth_0,converged"
    assert st.to_dict()["pairwise"][0]["a"] == 0


# -- ablation -----------------------------------------------------------------------------

def test_variant_names_round_trip():
    assert len(ALL_VARIANTS) == 8
    for flags in ALL_VARIANTS:
        assert parse_variant(variant_name(flags)) == flags
    assert parse_variant("ResNet-SH-NA-Stable") == {"SH", "NA", "Stable"}
    assert variant_name([]) == "plain"
    with pytest.raises(ValueError):
        parse_variant("SH-BN")


def test_model_settings_validation():
    with pytest.raises(ValueError):
        ModelSettings.from_dict({"hiden": 3})


def test_ablation_grid_small():
    ds = make_blobs(n_per_class=20, dim=3, classes=2, seed=0)
    settings = ModelSettings(hidden=5, K=6, h=0.5)
    res = ablation_grid(ds, [{"SH", "NA", "Stable"}, {"SH", "Stable"}, set()],
                        TrainConfig(epochs=2, batch_size=8), settings)
    assert list(res) == ["SH-NA-Stable", "SH-Stable", "plain"]
    for r in res.values():
        assert len(r.history) == 2 and len(r.loss_by_depth) == 7
    assert res["plain"].final.audit_passed is None
    table, curves = io.StringIO(), io.StringIO()
    write_ablation_table(res, table)
    write_loss_by_depth(res, curves)
    assert len(table.getvalue().splitlines()) == 4
    assert curves.getvalue().splitlines()[0] == "k,SH-NA-Stable,SH-Stable,plain"
    assert len(curves.getvalue().splitlines()) == 8
