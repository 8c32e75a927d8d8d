"""Drifter-referenced verification: angle, magnitude and vector errors.

A predicted direction is correct when the angle to the drifter velocity is at
most 45 degrees, a magnitude when the speeds differ by at most 2.5 cm/s; MEVA
is the mean Euclidean norm of the velocity difference. Only drifter
observations faster than 0.25 m/s are scored.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InputError
from .synth_ocean import DrifterTrack, drifter_samples, iso_to_day

ANGLE_THRESHOLD_DEG = 45.0
MAGNITUDE_THRESHOLD = 0.025
SPEED_FILTER = 0.25
# Absorbs round-off so values that equal a threshold analytically count as correct.
ANGLE_TOL_DEG = 1e-9
MAGNITUDE_TOL = 1e-12


def angle_error(w_hat, w_drifter):
    """Angle in degrees, in [0, 180], between predicted and observed velocity."""
    a = np.asarray(w_hat, dtype=np.float64)
    b = np.asarray(w_drifter, dtype=np.float64)
    na = np.hypot(a[..., 0], a[..., 1])
    nb = np.hypot(b[..., 0], b[..., 1])
    if np.any(na == 0) or np.any(nb == 0):
        raise InputError("angle undefined for a zero vector")
    # atan2 keeps full precision near 0 and 180 degrees, where arccos does not.
    dot = a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1]
    cross = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return np.degrees(np.arctan2(np.abs(cross), dot))


def magnitude_error(w_hat, w_drifter):
    a = np.asarray(w_hat, dtype=np.float64)
    b = np.asarray(w_drifter, dtype=np.float64)
    return np.abs(np.hypot(a[..., 0], a[..., 1]) - np.hypot(b[..., 0], b[..., 1]))


def vector_error(w_hat, w_drifter):
    a = np.asarray(w_hat, dtype=np.float64)
    b = np.asarray(w_drifter, dtype=np.float64)
    return np.hypot(a[..., 0] - b[..., 0], a[..., 1] - b[..., 1])


def angle_correct(theta):
    return np.asarray(theta) <= ANGLE_THRESHOLD_DEG + ANGLE_TOL_DEG


def magnitude_correct(dm):
    return np.asarray(dm) <= MAGNITUDE_THRESHOLD + MAGNITUDE_TOL


@dataclass(frozen=True)
class MatchedPair:
    w_hat: tuple[float, float]
    w_drifter: tuple[float, float]
    lat: float
    lon: float
    valid_day: int
    lead: int


def interpolate_field(values: np.ndarray, mask: np.ndarray, grid, lat, lon, method: str = "bilinear"):
    """Interpolate a gridded field at points; returns ``(values, valid)``.

    Bilinear weights between cell centres (clamped in the outer half-cells);
    a point is valid only if every contributing cell is masked in.
    """
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    inside = grid.contains(lat, lon)
    H, W = grid.shape
    y = (lat - grid.lat_min) / grid.resolution - 0.5
    x = (lon - grid.lon_min) / grid.resolution - 0.5
    if method == "nearest":
        r = np.clip(np.floor(y + 0.5).astype(int), 0, H - 1)
        c = np.clip(np.floor(x + 0.5).astype(int), 0, W - 1)
        return np.where(inside, values[r, c], 0.0), inside & mask[r, c]
    if method != "bilinear":
        raise InputError(f"unknown interpolation {method!r}")
    y = np.clip(y, 0.0, H - 1)
    x = np.clip(x, 0.0, W - 1)
    r0 = np.minimum(np.floor(y).astype(int), max(H - 2, 0))
    c0 = np.minimum(np.floor(x).astype(int), max(W - 2, 0))
    r1 = np.minimum(r0 + 1, H - 1)
    c1 = np.minimum(c0 + 1, W - 1)
    fy = y - r0
    fx = x - c0
    out = (
        values[r0, c0] * (1 - fy) * (1 - fx)
        + values[r0, c1] * (1 - fy) * fx
        + values[r1, c0] * fy * (1 - fx)
        + values[r1, c1] * fy * fx
    )
    # A neighbour with zero weight may be unobserved without invalidating the point.
    def ok(r, c, wgt):
        return mask[r, c] | (wgt == 0)

    valid = (
        inside
        & ok(r0, c0, (1 - fy) * (1 - fx))
        & ok(r0, c1, (1 - fy) * fx)
        & ok(r1, c0, fy * (1 - fx))
        & ok(r1, c1, fy * fx)
    )
    return np.where(inside, out, 0.0), valid


def match_drifters(product, tracks: Sequence[DrifterTrack], speed_filter: float = SPEED_FILTER,
                   method: str = "bilinear") -> list[MatchedPair]:
    """Pair each daily drifter sample of a forecast's valid days with the forecast current there."""
    pairs = []
    u_all, mu_all = product.fields["U"]
    v_all, mv_all = product.fields["V"]
    for lead in product.leads:
        day = product.issue_day + lead
        _, lat, lon, u, v = drifter_samples(tracks, day)
        if lat.size == 0:
            continue
        keep = np.hypot(u, v) > speed_filter
        lat, lon, u, v = lat[keep], lon[keep], u[keep], v[keep]
        uh, ok_u = interpolate_field(u_all[lead - 1], mu_all[lead - 1], product.grid, lat, lon, method)
        vh, ok_v = interpolate_field(v_all[lead - 1], mv_all[lead - 1], product.grid, lat, lon, method)
        for i in np.flatnonzero(ok_u & ok_v):
            pairs.append(MatchedPair((float(uh[i]), float(vh[i])), (float(u[i]), float(v[i])),
                                     float(lat[i]), float(lon[i]), int(day), int(lead)))
    return pairs


@dataclass
class LeadMetrics:
    pct_correct_angle: float | None
    pct_correct_magnitude: float | None
    meva: float | None
    n_pairs: int


@dataclass
class MetricsReport:
    leads: dict[int, LeadMetrics]
    region: str = ""
    checkpoint_hash: str = ""
    label: str = ""

    def at(self, lead: int) -> LeadMetrics:
        return self.leads.get(lead, LeadMetrics(None, None, None, 0))

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "region": self.region,
            "checkpoint_hash": self.checkpoint_hash,
            "leads": {str(k): asdict(v) for k, v in sorted(self.leads.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls({int(k): LeadMetrics(**v) for k, v in d["leads"].items()}, d.get("region", ""),
                   d.get("checkpoint_hash", ""), d.get("label", ""))


def evaluate(pairs: Sequence[MatchedPair], leads: Sequence[int] | None = None, region: str = "",
             checkpoint_hash: str = "", label: str = "") -> MetricsReport:
    """Per-lead percentages of correct angles and magnitudes, and MEVA."""
    lead_arr = np.array([p.lead for p in pairs], dtype=int)
    w_hat = np.array([p.w_hat for p in pairs], dtype=np.float64).reshape(-1, 2)
    w_obs = np.array([p.w_drifter for p in pairs], dtype=np.float64).reshape(-1, 2)
    if leads is None:
        leads = sorted(set(lead_arr.tolist()))
    out = {}
    for lead in leads:
        sel = lead_arr == lead
        n = int(sel.sum())
        if n == 0:
            out[int(lead)] = LeadMetrics(None, None, None, 0)
            continue
        a, b = w_hat[sel], w_obs[sel]
        ang_ok = angle_correct(angle_error(a, b)) if np.all(np.hypot(a[:, 0], a[:, 1]) > 0) else _angle_ok_with_zero(a, b)
        mag_ok = magnitude_correct(magnitude_error(a, b))
        out[int(lead)] = LeadMetrics(
            100.0 * int(ang_ok.sum()) / n,
            100.0 * int(mag_ok.sum()) / n,
            float(np.mean(vector_error(a, b))),
            n,
        )
    return MetricsReport(out, region, checkpoint_hash, label)


def _angle_ok_with_zero(a, b):
    # A zero prediction has no direction and is never correct.
    nz = np.hypot(a[:, 0], a[:, 1]) > 0
    ok = np.zeros(len(a), dtype=bool)
    if nz.any():
        ok[nz] = angle_correct(angle_error(a[nz], b[nz]))
    return ok


def render_table(reports: Mapping[str, MetricsReport], leads: Sequence[int] = (1, 7)) -> str:
    """Markdown table: one row per model, angle/magnitude/MEVA columns per lead."""
    head = ["Model"]
    for l in leads:
        head += [f"Angle % T+{l}", f"Magnitude % T+{l}", f"MEVA T+{l} (m/s)"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]

    def fmt(x, nd):
        return "n/a" if x is None else f"{x:.{nd}f}"

    for name, rep in reports.items():
        row = [name]
        for l in leads:
            m = rep.at(l)
            row += [fmt(m.pct_correct_angle, 1), fmt(m.pct_correct_magnitude, 1), fmt(m.meva, 3)]
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- ship routes


def route_projection(route: Sequence[tuple[float, float, float, float]], product, method: str = "bilinear"):
    """Along-heading forecast current (m/s) at each route point, or None outside the horizon.

    Route points are ``(day, lat, lon, heading_deg)`` with the heading
    clockwise from north, so the projection is ``u sin h + v cos h``.
    """
    out: list[float | None] = []
    u_all, mu_all = product.fields["U"]
    v_all, mv_all = product.fields["V"]
    for day, lat, lon, heading in route:
        lead = int(math.floor(day)) - product.issue_day
        if lead < 1 or lead > product.n_leads:
            out.append(None)
            continue
        uh, ok_u = interpolate_field(u_all[lead - 1], mu_all[lead - 1], product.grid, [lat], [lon], method)
        vh, ok_v = interpolate_field(v_all[lead - 1], mv_all[lead - 1], product.grid, [lat], [lon], method)
        if not (ok_u[0] and ok_v[0]):
            out.append(None)
            continue
        h = math.radians(heading)
        out.append(float(uh[0] * math.sin(h) + vh[0] * math.cos(h)))
    return out


def read_route_csv(path) -> list[tuple[float, float, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["timestamp_iso8601", "lat", "lon", "heading_deg"]
        if reader.fieldnames != expected:
            raise InputError(f"route CSV header must be {','.join(expected)}")
        return [(iso_to_day(r["timestamp_iso8601"]), float(r["lat"]), float(r["lon"]), float(r["heading_deg"])) for r in reader]
