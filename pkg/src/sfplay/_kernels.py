"""Compiled inner loop of stochastic fictitious play with logit choices."""

import numpy as np
from numba import njit


@njit(cache=True)
def sfp_logit_chunk(payoffs, digits, offsets, inv_eta, counts, n, uniforms,
                    n0, stride, dense_from, n_end,
                    out_states, out_n, pos,
                    noise, cond, actions, rec_pos):
    """Advance the empirical-count state by ``uniforms.shape[0]`` plays.

    ``payoffs[i, s]`` is player i's payoff at the pure profile with flat
    index ``s`` whose actions are ``digits[s]``.  ``counts`` holds the
    per-action play counts after ``n`` plays and is updated in place.
    A state is stored when the play index ``k = n - n0`` is a multiple of
    ``stride``, is ``>= dense_from`` or equals ``n_end - n0``.  Noise
    arrays with zero rows disable recording.  Returns ``(n, pos, rec_pos)``.
    """
    n_players = offsets.shape[0] - 1
    n_prof = digits.shape[0]
    dim = counts.shape[0]
    x = np.empty(dim)
    br = np.empty(dim)
    record = noise.shape[0] > 0
    for k in range(uniforms.shape[0]):
        for d in range(dim):
            x[d] = counts[d] / n
        for i in range(n_players):
            lo = offsets[i]
            m = offsets[i + 1] - lo
            for a in range(m):
                br[lo + a] = 0.0
            for s in range(n_prof):
                w = payoffs[i, s]
                for j in range(n_players):
                    if j != i:
                        w *= x[offsets[j] + digits[s, j]]
                br[lo + digits[s, i]] += w
            top = br[lo]
            for a in range(1, m):
                if br[lo + a] > top:
                    top = br[lo + a]
            tot = 0.0
            for a in range(m):
                e = np.exp((br[lo + a] - top) * inv_eta[i])
                if e < 2.2250738585072014e-308:
                    e = 2.2250738585072014e-308
                br[lo + a] = e
                tot += e
            for a in range(m):
                br[lo + a] /= tot
        for i in range(n_players):
            lo = offsets[i]
            m = offsets[i + 1] - lo
            u = uniforms[k, i]
            acc = 0.0
            act = m - 1
            for a in range(m):
                acc += br[lo + a]
                if u < acc:
                    act = a
                    break
            if record:
                actions[rec_pos, i] = act
            counts[lo + act] += 1
        if record:
            for d in range(dim):
                cond[rec_pos, d] = x[d]
                noise[rec_pos, d] = -br[d]
            for i in range(n_players):
                noise[rec_pos, offsets[i] + actions[rec_pos, i]] += 1.0
            rec_pos += 1
        n += 1
        step = n - n0
        if step % stride == 0 or step >= dense_from or n == n_end:
            for d in range(dim):
                out_states[pos, d] = counts[d] / n
            out_n[pos] = n
            pos += 1
    return n, pos, rec_pos
