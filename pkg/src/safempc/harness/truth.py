"""Simulated plants: the true dynamics and noise the learner never sees directly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from safempc.geometry import Polytope, contains
from safempc.model import LinearModel


def regular_octagon(radius, phase=np.pi / 8, center=(0.0, 0.0)) -> Polytope:
    k = np.arange(8)
    ang = phase + k * np.pi / 4
    pts = np.asarray(center, dtype=float) + radius * np.column_stack([np.cos(ang), np.sin(ang)])
    return Polytope.from_vertices(pts)


@dataclass
class SimTruth:
    model: LinearModel
    noise_set: Polytope
    density_bound: float
    rng: np.random.Generator

    def sample_noise(self):
        """Uniform draw from the noise set by rejection from its bounding box."""
        V = self.noise_set.vertex_cloud()
        lo, hi = V.min(axis=0), V.max(axis=0)
        while True:
            w = self.rng.uniform(lo, hi)
            if contains(self.noise_set, w, tol=0.0):
                return w

    def step(self, s, a):
        w = self.sample_noise()
        return self.model.predict(s, a) + w, w

    @classmethod
    def scalar(cls, seed, A=1.1, B=0.1, noise_bound=0.1):
        model = LinearModel([[A]], [[B]])
        W = Polytope.box([-noise_bound], [noise_bound])
        return cls(model, W, 1.0 / (2.0 * noise_bound), np.random.default_rng(seed))

    @classmethod
    def octagon(cls, seed, model: LinearModel, radius=0.03, phase=np.pi / 8):
        W = regular_octagon(radius, phase)
        area = 2.0 * np.sqrt(2.0) * radius ** 2
        return cls(model, W, 1.0 / area, np.random.default_rng(seed))
