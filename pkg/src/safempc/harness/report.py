"""Stability post-processing of a tube trace: V, W, rates and the ISS fit."""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from safempc.mpc.tube import TubeController, TubeMpcParameters, TubeSetting
from safempc.harness.trace import _clean
from safempc.stability import (
    DegenerateSequence,
    LyapunovRecord,
    NoMonotoneFit,
    check_iss,
    check_v_decrease,
    check_w_decrease,
    estimate_rates,
    w_value,
)


def theta_star(trace, last=100):
    """Mean parameter vector over the final ``last`` epochs."""
    th = np.array([e["theta"] for e in trace.epochs], dtype=float)
    if len(th) == 0:
        raise ValueError("trace has no epochs")
    return th[-min(last, len(th)):].mean(axis=0)


def _segments(steps):
    # a segment is a run of consecutive steps sharing one parameter vector and one epoch
    seg, out = -1, []
    prev = None
    for r in steps:
        key = (r["epoch"], r["theta_hash"])
        if key != prev:
            seg += 1
            prev = key
        out.append(seg)
    return out


def realized_deltas(steps, gamma):
    """Per parameter hash, the largest V(s+) - gamma V(s) seen along the run under that parameter."""
    out = {}
    for a, b in zip(steps[:-1], steps[1:]):
        h = a["theta_hash"]
        if b["theta_hash"] == h:
            v_next = b["v_hat"]
        elif b.get("v_previous") is not None:
            v_next = b["v_previous"]
        else:
            continue
        out[h] = max(out.get(h, 0.0), v_next - gamma * a["v_hat"])
    return out


def lyapunov_records(trace, th_star, zeta, gamma):
    """Records with the level set rebuilt from the run estimate and the realized decrease.

    The level-set threshold uses the larger of the run-time delta estimate and
    the realized one-step values, since delta is a supremum over states and the
    visited states are samples of it.
    """
    steps = trace.steps
    real = realized_deltas(steps, gamma)
    segs = _segments(steps)
    recs, deltas = [], []
    for r, seg in zip(steps, segs):
        d = max(r.get("delta_hat") or 0.0, real.get(r["theta_hash"], 0.0))
        deltas.append(d)
        th = np.asarray(r["theta"], dtype=float)
        recs.append(LyapunovRecord(step=r["step"], epoch=seg, v_hat=r["v_hat"],
                                   delta_p=float(np.linalg.norm(th - th_star)),
                                   w_value=w_value(r["v_hat"], th, th_star, zeta),
                                   in_level_set=bool(r["v_hat"] <= d / (1.0 - gamma))))
    return recs, np.array(deltas)


def sampled_value_pairs(trace, setting, n_samples=200, max_pairs=20, seed=0):
    """Value changes across applied updates at states feasible for both parameters.

    States are drawn uniformly from the state box and kept when both controllers
    are feasible. Only ``max_pairs`` evenly spaced updates are sampled.
    """
    rng = np.random.default_rng(seed)
    ths = []
    for r in trace.steps:
        th = tuple(r["theta"])
        if not ths or ths[-1] != th:
            ths.append(th)
    pairs = list(zip(ths[:-1], ths[1:]))
    if len(pairs) > max_pairs:
        idx = np.unique(np.linspace(0, len(pairs) - 1, max_pairs).round().astype(int))
        pairs = [pairs[i] for i in idx]
    out, outliers = [], []
    lo, hi = -setting.x_max, setting.x_max
    for t0, t1 in pairs:
        c0 = TubeController(TubeMpcParameters.from_vector(np.array(t0)), setting)
        c1 = TubeController(TubeMpcParameters.from_vector(np.array(t1)), setting)
        step = float(np.linalg.norm(np.subtract(t1, t0)))
        kept, tries = 0, 0
        worst = (0.0, None)
        while kept < n_samples and tries < 20 * n_samples:
            tries += 1
            s = rng.uniform(lo, hi, size=2)
            v0, v1 = c0.value(s), c1.value(s)
            if not (np.isfinite(v0) and np.isfinite(v1)):
                continue
            kept += 1
            out.append((v0, v1, step))
            if step > 0 and abs(v1 - v0) / step > worst[0]:
                worst = (abs(v1 - v0) / step, s)
        if worst[1] is not None:
            outliers.append({"ratio": worst[0], "state": worst[1].tolist(), "step": step})
    return out, outliers


def stability_report(trace, zeta=None, gamma=None, last=100, n_samples=200, max_pairs=20, seed=0):
    if trace.header.get("experiment") != "tube":
        raise ValueError("stability report needs a tube trace")
    cfg = trace.header.get("config", {})
    zeta = cfg.get("zeta", 0.1) if zeta is None else zeta
    gamma = cfg.get("gamma_lyap", 0.9) if gamma is None else gamma
    setting = TubeSetting(horizon=int(cfg.get("horizon", 50)))
    th_star = theta_star(trace, last)
    recs, deltas = lyapunov_records(trace, th_star, zeta, gamma)

    v_rep = check_v_decrease(recs, within_epoch=True)
    w_rep = check_w_decrease(recs)

    gate_pairs = []
    for a, b in zip(trace.steps[:-1], trace.steps[1:]):
        if b["theta_hash"] != a["theta_hash"] and b.get("v_previous") is not None:
            gate_pairs.append((b["v_previous"], b["v_hat"],
                               float(np.linalg.norm(np.subtract(b["theta"], a["theta"])))))
    sampled, outliers = ([], []) if n_samples <= 0 else sampled_value_pairs(trace, setting, n_samples,
                                                                          max_pairs, seed)
    thetas = [e["theta"] for e in trace.epochs]
    try:
        rates = estimate_rates(thetas, th_star, gate_pairs + sampled).as_dict()
    except DegenerateSequence as exc:
        rates = {"error": str(exc)}

    v = np.array([r.v_hat for r in recs])
    upd = np.array([0.0] + [float(np.linalg.norm(np.subtract(b["theta"], a["theta"])))
                            for a, b in zip(trace.steps[:-1], trace.steps[1:])])
    iss = {}
    for name, dp in (("distance_to_star", np.array([r.delta_p for r in recs])), ("update_size", upd)):
        # the pair (i, i+1) uses V under theta_i at s_i, V under theta_{i+1} at s_{i+1}, and delta of theta_i
        try:
            fit = check_iss(v[:-1], v[1:], dp[:-1] if name == "distance_to_star" else dp[1:], gamma,
                            deltas[:-1])
            iss[name] = {"ok": True, "margin": fit.margin, "knots": fit.knots.tolist(),
                         "values": fit.values.tolist()}
        except NoMonotoneFit as exc:
            iss[name] = {"ok": False, "error": str(exc)}

    return {
        "theta_star": th_star.tolist(),
        "zeta": zeta,
        "gamma": gamma,
        "rates": rates,
        "zeta_sufficient": bool(rates.get("zeta_min", np.inf) <= zeta),
        "v_decrease": {"checked": v_rep.checked, "violations": v_rep.violations,
                       "level_exits": v_rep.level_exits},
        "w_decrease": {"checked": w_rep.checked, "violations": w_rep.violations,
                       "level_exits": w_rep.level_exits},
        "iss": iss,
        "alpha_v_outliers": outliers,
        "series": {"step": [r.step for r in recs], "v_hat": v.tolist(),
                   "w": [r.w_value for r in recs], "delta_p": [r.delta_p for r in recs],
                   "in_level_set": [r.in_level_set for r in recs]},
    }


def write_report(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    series = report["series"]
    body = {k: v for k, v in report.items() if k != "series"}
    p = os.path.join(out_dir, "stability.json")
    with open(p, "w") as fh:
        json.dump(_clean(body), fh, indent=1, sort_keys=True)
        fh.write("\n")
    q = os.path.join(out_dir, "stability_series.csv")
    with open(q, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "v_hat", "w", "delta_p", "in_level_set"])
        for row in zip(series["step"], series["v_hat"], series["w"], series["delta_p"], series["in_level_set"]):
            w.writerow([row[0], repr(float(row[1])), repr(float(row[2])), repr(float(row[3])), int(row[4])])
    return [p, q]

