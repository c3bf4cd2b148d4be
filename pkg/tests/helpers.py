"""Shared fixtures for the unit and acceptance tests."""
import dataclasses

import numpy as np

from dklinv import gp, nn, pde, pretrain


def with_step_fraction(problem, fraction):
    """Copy of ``problem`` whose operator stencil uses ``fraction`` of each box edge."""
    steps = tuple(fraction * (h - l) for l, h in zip(problem.lower, problem.upper))
    return dataclasses.replace(problem, operator=dataclasses.replace(problem.operator, steps=steps))


def fd5_slice(fn, x, idx, h):
    out = np.empty(len(idx))
    for k, i in enumerate(idx):
        e = np.zeros(len(x))
        e[i] = h
        out[k] = (8 * (fn(x + e) - fn(x - e)) - (fn(x + 2 * e) - fn(x - 2 * e))) / (12 * h)
    return out


def composite_gradient_error(seed, step_fraction=0.1, tau=1e-3, h=1e-3):
    """Relative error of the tape gradient of the composite loss on a random
    5-component slice, against a five-point central difference."""
    rng = np.random.default_rng(seed)
    pb = with_step_fraction(pde.make_problem("heat1d"), step_fraction)
    o = pde.generate_observations(pb, 8, 5, seed)
    obs = gp.ObservationSet(o.S_u, o.u, o.S_f, o.f, tau, tau)
    col = pde.sample_collocation(pb, 10, seed + 1)
    arch = nn.Architecture.default(2, 2, (8,), pb.lower, pb.upper)
    obj = pretrain.PretrainObjective(pb, obs, col, arch)
    x = np.r_[nn.init(arch, seed).flatten(), rng.uniform(-0.5, 0.5, 3), rng.uniform(-1, 1, 1)]
    _, g = obj.value_and_grad(x)
    idx = rng.choice(len(x), 5, replace=False)
    fd = fd5_slice(lambda z: obj.value(z)[0], x, idx, h)
    return np.max(np.abs(g[idx] - fd)) / np.max(np.abs(fd))
