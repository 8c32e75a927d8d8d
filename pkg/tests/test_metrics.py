import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orcast.errors import InputError
from orcast.forecast import ForecastProduct
from orcast.geo_grid import GridSpec
from orcast.metrics import (
    MatchedPair,
    MetricsReport,
    angle_correct,
    angle_error,
    evaluate,
    interpolate_field,
    magnitude_correct,
    magnitude_error,
    match_drifters,
    read_route_csv,
    render_table,
    route_projection,
    vector_error,
)
from orcast.synth_ocean import DrifterTrack

finite = st.floats(-5, 5, allow_nan=False)


def test_angle_examples():
    assert angle_error([1, 0], [0, 1]) == pytest.approx(90.0)
    assert angle_error([1, 0], [-1, 0]) == pytest.approx(180.0)
    assert angle_error([2, 2], [1, 1]) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InputError):
        angle_error([0, 0], [1, 0])


def test_threshold_boundaries_inclusive():
    w = [math.cos(math.radians(45)), math.sin(math.radians(45))]
    assert bool(angle_correct(angle_error(w, [1, 0])))
    assert not bool(angle_correct(45.001))
    assert bool(magnitude_correct(magnitude_error([0.3, 0], [0.325, 0])))
    assert not bool(magnitude_correct(0.0251))


def test_vector_error_example():
    assert vector_error([0.3, 0.4], [0.0, 0.0]) == pytest.approx(0.5)


@settings(max_examples=200)
@given(finite, finite, finite, finite)
def test_error_properties(a, b, c, d):
    u, w = np.array([a, b]), np.array([c, d])
    assert magnitude_error(u, w) <= vector_error(u, w) + 1e-12
    assert vector_error(u, w) == pytest.approx(vector_error(w, u))
    if np.hypot(a, b) > 1e-3 and np.hypot(c, d) > 1e-3:
        t = angle_error(u, w)
        assert 0.0 <= t <= 180.0
        assert t == pytest.approx(angle_error(3 * u, w), abs=1e-9)


def pair(w_hat, w, lead=1):
    return MatchedPair(tuple(w_hat), tuple(w), 35.0, -29.0, 10 + lead, lead)


def test_evaluate_hand_counts():
    pairs = [
        pair((0.5, 0.0), (0.5, 0.01)),  # both right
        pair((0.0, 0.5), (0.5, 0.0)),  # wrong angle, right magnitude
        pair((0.3, 0.0), (0.5, 0.0)),  # right angle, wrong magnitude
        pair((0.0, 0.0), (0.4, 0.0)),  # zero prediction: no direction
    ]
    rep = evaluate(pairs, leads=[1, 2])
    m = rep.at(1)
    assert m.n_pairs == 4
    assert m.pct_correct_angle == pytest.approx(50.0)
    assert m.pct_correct_magnitude == pytest.approx(50.0)
    expected = np.mean([0.01, math.hypot(0.5, 0.5), 0.2, 0.4])
    assert m.meva == pytest.approx(expected)
    assert rep.at(2).n_pairs == 0 and rep.at(2).meva is None


def test_report_json_round_trip():
    rep = evaluate([pair((0.5, 0.0), (0.4, 0.0)), pair((0.5, 0.0), (0.4, 0.1), lead=3)], label="x", region="global")
    back = MetricsReport.from_dict(json.loads(rep.to_json()))
    assert back.to_dict() == rep.to_dict()
    assert sorted(back.leads) == [1, 3]


def test_render_table():
    rep = evaluate([pair((0.5, 0.0), (0.5, 0.0))])
    out = render_table({"a": rep})
    lines = out.strip().splitlines()
    assert lines[0].startswith("| Model | Angle % T+1")
    assert lines[2] == "| a | 100.0 | 100.0 | 0.000 | n/a | n/a | n/a |"


# ---- interpolation and matching

G = GridSpec.from_shape(30.0, 0.0, 4, 4, 1.0)


def test_bilinear_reproduces_linear_fields():
    lat, lon = np.meshgrid(G.lat_centers(), G.lon_centers(), indexing="ij")
    f = 2.0 * lat - 3.0 * lon
    pts_lat = np.array([30.7, 31.5, 32.9, 33.2])
    pts_lon = np.array([0.6, 2.25, 1.1, 3.4])
    v, ok = interpolate_field(f, np.ones_like(f, bool), G, pts_lat, pts_lon)
    assert ok.all()
    np.testing.assert_allclose(v, 2 * pts_lat - 3 * pts_lon)


def test_interpolation_validity():
    mask = np.ones((4, 4), bool)
    mask[1, 1] = False
    _, ok = interpolate_field(np.zeros((4, 4)), mask, G, [31.5, 31.7, 30.5, 29.0], [1.5, 1.7, 0.5, 1.0])
    # exactly on centre (1,1); touches (1,1); away from it; outside the grid
    assert ok.tolist() == [False, False, True, False]
    v, ok = interpolate_field(np.arange(16.0).reshape(4, 4), mask, G, [30.5], [3.9], method="nearest")
    assert v[0] == 3.0 and ok[0]
    with pytest.raises(InputError):
        interpolate_field(np.zeros((4, 4)), mask, G, [31.0], [1.0], method="cubic")


def product_uniform(u, v, n_leads=2, issue=10):
    shape = (n_leads,) + G.shape
    return ForecastProduct(issue, G, {"U": (np.full(shape, u), np.ones(shape, bool)),
                                      "V": (np.full(shape, v), np.ones(shape, bool))})


def test_match_applies_speed_filter():
    t = DrifterTrack("d", daily_day=np.array([11, 11, 12, 13]), daily_lat=np.array([31.0, 31.0, 32.0, 32.0]),
                     daily_lon=np.array([1.0, 2.0, 1.0, 1.0]), daily_u=np.array([0.3, 0.1, 0.0, 0.5]),
                     daily_v=np.array([0.0, 0.1, 0.26, 0.0]))
    pairs = match_drifters(product_uniform(0.2, 0.1), [t])
    assert [(p.lead, p.valid_day) for p in pairs] == [(1, 11), (2, 12)]
    assert pairs[0].w_hat == pytest.approx((0.2, 0.1))
    assert pairs[1].w_drifter == (0.0, 0.26)


def test_route_projection(tmp_path):
    p = product_uniform(0.3, -0.1)
    route = [(11.5, 31.0, 1.0, 90.0), (12.0, 31.0, 1.0, 0.0), (13.0, 31.0, 1.0, 0.0), (10.0, 31.0, 1.0, 0.0),
             (11.0, 50.0, 1.0, 0.0)]
    out = route_projection(route, p)
    assert out[0] == pytest.approx(0.3) and out[1] == pytest.approx(-0.1)
    assert out[2:] == [None, None, None]
    csv = tmp_path / "r.csv"
    csv.write_text("timestamp_iso8601,lat,lon,heading_deg\n2023-01-02T12:00:00Z,31.0,1.0,45\n")
    ((day, lat, lon, h),) = read_route_csv(csv)
    assert (lat, lon, h) == (31.0, 1.0, 45.0)
    assert day == pytest.approx(math.floor(day) + 0.5)
    csv.write_text("time,lat,lon,heading\n")
    with pytest.raises(InputError):
        read_route_csv(csv)
