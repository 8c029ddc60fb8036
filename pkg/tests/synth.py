"""Synthetic observations generated from the reference constants."""

import itertools

import numpy as np

from qsl import laws

N_GRID = (74e6, 145e6, 297e6, 595e6)
D_GRID = (10e9, 20e9, 50e9, 100e9)
G_GRID = (32, 64, 128, 256)
ANCHORS = ((6.5e9, 200e9), (12.7e9, 200e9))

REF_C, REF_DELTAS = laws.reference_params()


def chinchilla_runs(sigma=0.0, seed=0, c=REF_C):
    rng = np.random.default_rng(seed)
    pts = list(itertools.product(N_GRID, D_GRID)) + list(ANCHORS)
    out = []
    for n, d in pts:
        loss = laws.chinchilla_loss(c, n, d) * np.exp(sigma * rng.standard_normal())
        out.append((n, d, float(loss)))
    return out


def delta_obs(tag="w4a4", sigma=0.0, seed=0, d=None):
    d = d or REF_DELTAS[tag]
    rng = np.random.default_rng(seed)
    out = []
    for n, t, g in itertools.product(N_GRID, D_GRID, G_GRID):
        v = laws.delta(d, n, t, g) * np.exp(sigma * rng.standard_normal())
        out.append((n, t, float(g), float(v)))
    return out
