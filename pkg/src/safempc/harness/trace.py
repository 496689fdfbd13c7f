"""Append-only run traces: a JSON header, JSON-lines steps and an epoch table."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from safempc import __version__


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, float) and not np.isfinite(x):
        return None if np.isnan(x) else ("inf" if x > 0 else "-inf")
    return x


@dataclass
class RunTrace:
    header: dict = field(default_factory=dict)
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def add_step(self, **rec):
        self.steps.append(_clean(rec))

    def add_epoch(self, **rec):
        self.epochs.append(_clean(rec))

    def states(self):
        return np.array([r["state"] for r in self.steps], dtype=float)

    def decisions(self):
        out = []
        for r in self.steps:
            d = r.get("decision")
            if d is not None:
                out.append(dict(d, proposal=r.get("proposal")))
        return out

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        hdr = dict(self.header, code_version=__version__)
        with open(os.path.join(out_dir, "header.json"), "w") as fh:
            json.dump(_clean(hdr), fh, indent=1, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(out_dir, "steps.jsonl"), "w") as fh:
            for r in self.steps:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        with open(os.path.join(out_dir, "extras.json"), "w") as fh:
            json.dump(_clean(self.extras), fh, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(out_dir, "epochs.csv"), "w", newline="") as fh:
            if self.epochs:
                keys = list(self.epochs[0].keys())
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(keys)
                for r in self.epochs:
                    w.writerow([json.dumps(r[k]) for k in keys])

    @classmethod
    def read(cls, out_dir):
        with open(os.path.join(out_dir, "header.json")) as fh:
            header = json.load(fh)
        with open(os.path.join(out_dir, "steps.jsonl")) as fh:
            steps = [json.loads(line) for line in fh if line.strip()]
        extras = {}
        p = os.path.join(out_dir, "extras.json")
        if os.path.exists(p):
            with open(p) as fh:
                extras = json.load(fh)
        epochs = []
        with open(os.path.join(out_dir, "epochs.csv"), newline="") as fh:
            rows = list(csv.reader(fh))
        if rows:
            keys = rows[0]
            epochs = [{k: json.loads(v) for k, v in zip(keys, row)} for row in rows[1:]]
        return cls(header, steps, epochs, extras)
