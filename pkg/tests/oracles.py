"""Independent reference implementations used as test oracles.

These are deliberately naive (pure Python loops, no shared code with the
package) so an agreement between the two is meaningful.
"""

from __future__ import annotations

import math

import numpy as np

M64 = (1 << 64) - 1


def ref_splitmix64(state):
    state = (state + 0x9E3779B97F4A7C15) & M64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
    return state, z ^ (z >> 31)


def ref_xoshiro_stream(seed, n):
    """Scalar xoshiro256++ seeded with four splitmix64 outputs."""
    sm = seed & M64
    s = []
    for _ in range(4):
        sm, z = ref_splitmix64(sm)
        s.append(z)

    def rotl(x, k):
        return ((x << k) | (x >> (64 - k))) & M64

    out = []
    for _ in range(n):
        result = (rotl((s[0] + s[3]) & M64, 23) + s[0]) & M64
        t = (s[1] << 17) & M64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
        out.append(result)
    return out


def ref_mlp_forward(layers, x):
    """Scalar-loop forward pass; ``layers`` is a list of (W, b, activation)."""
    h = [float(v) for v in x]
    for w, b, act in layers:
        fan_in, fan_out = len(w), len(w[0])
        z = []
        for j in range(fan_out):
            acc = float(b[j])
            for i in range(fan_in):
                acc += h[i] * float(w[i][j])
            z.append(math.tanh(acc) if act == "tanh" else acc)
        h = z
    return h


def fd_check(loss_fn, params, analytic, rng, probes=100, h=1e-5, rel_tol=1e-4, abs_floor=1e-7):
    """Central finite differences on ``probes`` random parameter entries.

    ``params`` are live arrays mutated in place and restored. Returns the
    worst relative error; the relative error of a probe is
    |a - n| / max(|a|, |n|, abs_floor).
    """
    sizes = np.array([p.size for p in params], dtype=float)
    worst = 0.0
    for _ in range(probes):
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        i = int(rng.integers(params[k].size))
        flat = params[k].reshape(-1)
        old = flat[i]
        flat[i] = old + h
        up = loss_fn()
        flat[i] = old - h
        down = loss_fn()
        flat[i] = old
        numeric = (up - down) / (2.0 * h)
        a = float(analytic[k].reshape(-1)[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
        worst = max(worst, rel)
    return worst


def ref_gae(rewards, values, dones, bootstrap, gamma, lam):
    """Forward-looking GAE written directly as the discounted sum of residuals."""
    T = len(rewards)
    adv = []
    for t in range(T):
        total, weight = 0.0, 1.0
        for k in range(t, T):
            nv = bootstrap if k == T - 1 else values[k + 1]
            nv = 0.0 if dones[k] else nv
            delta = rewards[k] + gamma * nv - values[k]
            total += weight * delta
            if dones[k]:
                break
            weight *= gamma * lam
        adv.append(total)
    return adv
