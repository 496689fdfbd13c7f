"""CSV series behind every figure, plus a gnuplot stub. No plotting dependency."""

from __future__ import annotations

import csv
import os

import numpy as np

from safempc.geometry import GeometryError, vertices_2d
from safempc.mpc.tube import TubeController, TubeMpcParameters, TubeSetting


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def _polygon_rows(P):
    try:
        V = vertices_2d(P)
    except GeometryError:
        return []
    V = np.vstack([V, V[:1]])
    return [tuple(v) for v in V]


def _closed(points):
    pts = np.asarray(points, dtype=float)
    if len(pts) == 0:
        return []
    c = pts.mean(axis=0)
    order = np.argsort(np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0]), kind="stable")
    pts = pts[order]
    return [tuple(v) for v in np.vstack([pts, pts[:1]])]


def emit_figures(trace, out_dir):
    """Write the figure series for a scalar or tube trace; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    kind = trace.header.get("experiment")
    paths = []
    if kind == "scalar":
        p = os.path.join(out_dir, "scalar_states.csv")
        _write(p, ["step", "state", "action", "u_max", "roa_lower", "K", "a_s", "outcome", "alpha"],
               [(r["step"], r["state"][0], r["action"][0], r["u_max"], r["roa"][0], r["theta"][0], r["theta"][1],
                 r["decision"]["outcome"], r["decision"]["alpha"]) for r in trace.steps])
        paths.append(p)
    elif kind == "tube":
        p = os.path.join(out_dir, "tube_states.csv")
        _write(p, ["step", "epoch", "s0", "s1", "action", "v_hat", "in_mrpi"],
               [(r["step"], r["epoch"], r["state"][0], r["state"][1], r["action"][0], r["v_hat"],
                 int(r["in_mrpi"])) for r in trace.steps])
        paths.append(p)
        p = os.path.join(out_dir, "tube_epochs.csv")
        n = len(trace.epochs[0]["theta"]) if trace.epochs else 0
        _write(p, ["epoch", "td", "J"] + [f"theta{j}" for j in range(n)],
               [(e["epoch"], e["td"] if e["td"] is not None else "", e["J"]) + tuple(e["theta"])
                for e in trace.epochs])
        paths.append(p)
        p = os.path.join(out_dir, "tube_noise.csv")
        _write(p, ["w0", "w1"], [tuple(r["noise"]) for r in trace.steps])
        paths.append(p)
        sets = {"truth_octagon": _closed(trace.extras.get("truth_vertices", [])),
                "learned_W": _closed(trace.extras.get("learned_W", []))}
        final = trace.extras.get("final_theta")
        if final is not None:
            cfg = trace.header.get("config", {})
            ctrl = TubeController(TubeMpcParameters.from_vector(np.asarray(final, dtype=float)),
                                  TubeSetting(horizon=int(cfg.get("horizon", 50))))
            sets["terminal"] = _polygon_rows(ctrl.terminal_set)
            sets["mrpi"] = _polygon_rows(ctrl.mrpi)
            sets["mrpi_outer"] = _polygon_rows(ctrl.max_invariant)
        for name, rows in sets.items():
            p = os.path.join(out_dir, f"set_{name}.csv")
            _write(p, ["x0", "x1"], rows)
            paths.append(p)
    else:
        raise ValueError(f"unknown experiment kind {kind!r}")
    p = os.path.join(out_dir, "plot.gp")
    with open(p, "w") as fh:
        fh.write("set datafile separator ','\n")
        fh.write("set key autotitle columnhead\n")
        for q in paths:
            name = os.path.basename(q)
            if name.startswith("set_"):
                fh.write(f"plot '{name}' using 1:2 with lines\npause -1\n")
            elif name.endswith("_states.csv"):
                fh.write(f"plot '{name}' using 1:3 with lines\npause -1\n")
        fh.write("# one plot per series; adjust columns as needed\n")
    paths.append(p)
    return paths
