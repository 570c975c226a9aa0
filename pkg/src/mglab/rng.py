"""Keyed random substreams for reproducible ensembles.

Paths are grouped into fixed blocks of ``BLOCK`` consecutive path indices.
Each (seed, block, stream) triple owns an independent generator keyed by
``SeedSequence(seed, spawn_key=(block, stream))``, so the draws seen by a
path depend only on the seed, its index and the time step, never on how
many other paths are simulated alongside it.
"""

from __future__ import annotations

import numpy as np

BLOCK = 256

NORMALS = 0
JUMP_COUNTS = 1
JUMP_MARKS = 2
AUX = 3

_BITGENS = {"sfc64": np.random.SFC64, "philox": np.random.Philox, "pcg64": np.random.PCG64}


def substream(seed, block, stream, bitgen="sfc64"):
    try:
        cls = _BITGENS[bitgen]
    except KeyError:
        raise ValueError(f"unknown bit generator {bitgen!r}") from None
    return np.random.Generator(cls(np.random.SeedSequence(int(seed), spawn_key=(int(block), int(stream)))))


class EnsembleStreams:
    """Block-keyed generators for ``n_paths`` paths starting at index 0.

    Every draw covers whole blocks and the surplus rows are discarded, so
    path ``i`` sees identical numbers whatever ``n_paths`` is.
    """

    def __init__(self, seed, n_paths, bitgen="sfc64"):
        self.seed = int(seed)
        self.n_paths = int(n_paths)
        self.n_blocks = -(-self.n_paths // BLOCK)
        self.bitgen = bitgen
        self._gens = {}

    def gen(self, block, stream):
        key = (block, stream)
        g = self._gens.get(key)
        if g is None:
            g = self._gens[key] = substream(self.seed, block, stream, self.bitgen)
        return g

    def normals(self, n_steps, r):
        """Standard normals, shape ``(n_steps, n_paths, r)``."""
        buf = np.empty((self.n_blocks, n_steps, BLOCK, r))
        for b in range(self.n_blocks):
            self.gen(b, NORMALS).standard_normal(out=buf[b])
        out = buf.transpose(1, 0, 2, 3).reshape(n_steps, self.n_blocks * BLOCK, r)
        return out[:, : self.n_paths]

    def normals_blocked(self, n_steps, r):
        """Standard normals in block layout, shape ``(n_blocks, n_steps, BLOCK, r)``.

        Path ``b*BLOCK + j`` at step ``i`` reads ``[b, i, j]``; slots past
        ``n_paths`` are padding.
        """
        buf = np.empty((self.n_blocks, n_steps, BLOCK, r))
        for b in range(self.n_blocks):
            self.gen(b, NORMALS).standard_normal(out=buf[b])
        return buf

    def poisson(self, n_steps, rate):
        """Jump counts per step for every slot, shape ``(n_steps, n_blocks*BLOCK)``.

        Padded slots are kept so that mark draws (which follow the counts)
        stay independent of the ensemble size; callers trim to ``n_paths``.
        """
        buf = np.empty((self.n_blocks, n_steps, BLOCK), dtype=np.int64)
        for b in range(self.n_blocks):
            buf[b] = self.gen(b, JUMP_COUNTS).poisson(rate, size=(n_steps, BLOCK))
        return buf.transpose(1, 0, 2).reshape(n_steps, -1)

    def marks(self, counts, sampler):
        """Marks for the jumps in padded ``counts`` from :meth:`poisson`.

        Returns ``(step, path, z)`` for real paths, sorted by step then path.
        ``sampler`` is called as ``sampler(generator, k)``.
        """
        steps, paths, zs = [], [], []
        for b in range(self.n_blocks):
            lo = b * BLOCK
            blk = counts[:, lo:lo + BLOCK]
            total = int(blk.sum())
            if total == 0:
                continue
            s_idx, p_idx = np.nonzero(blk)
            rep = blk[s_idx, p_idx]
            steps.append(np.repeat(s_idx, rep))
            paths.append(np.repeat(p_idx + lo, rep))
            zs.append(np.asarray(sampler(self.gen(b, JUMP_MARKS), total), dtype=float))
        if not steps:
            return np.empty(0, int), np.empty(0, int), np.empty(0)
        steps = np.concatenate(steps)
        paths = np.concatenate(paths)
        zs = np.concatenate(zs)
        keep = paths < self.n_paths
        steps, paths, zs = steps[keep], paths[keep], zs[keep]
        order = np.lexsort((paths, steps))
        return steps[order], paths[order], zs[order]
