"""Band-limited transfer-matrix engine for localized instances.

Positions are filled left to right.  With window halves Lm = max lo and
Lp = max hi, the particle eligible for position t is confined to
[t - Lp, t + Lm], so after t placements the only undetermined placement
statuses are those of the W = Lm + Lp + 1 particles around the frontier.
A DP layer is a set of W-bit occupancy words over those particles; bits for
particles below 1 are fixed to "placed" and particles above n never get set.

Weights factorize per placement: putting particle x at the frontier with
placed set S multiplies the stationary weight by prod_{y in S} p[y][x]
(every already-placed particle sits ahead of x).  The prefix part of S (all
particles below the window, always placed) is a precomputed prefix sum; the
in-window part is a subset sum over set bits, evaluated through two half-word
lookup tables per (position, candidate).  Everything is kept in log space so
forbidden pairs (p = 0) propagate as -inf and simply kill paths.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import CapExceeded, ContractError, EmptySupport
from .measure import DistributionTable, enumerate_stationary
from .perms import (BiasMatrix, BoundaryAssignment, LocalizationVector,
                    Permutation, is_localized, restrict_instance, embed)

DEFAULT_WINDOW_CAP = 22
FAST_WINDOW = 16
ENUM_SAMPLER_CAP = 7

NEG_INF = -math.inf


def _group_logsumexp(keys: np.ndarray, vals: np.ndarray):
    """Collapse duplicate keys by log-sum-exp; non-finite values are dropped."""
    finite = np.isfinite(vals)
    keys = keys[finite]
    vals = vals[finite]
    if keys.size == 0:
        return keys, vals
    order = np.argsort(keys, kind="stable")
    k = keys[order]
    v = vals[order]
    starts = np.r_[0, np.nonzero(np.diff(k))[0] + 1]
    uniq = k[starts]
    vmax = np.maximum.reduceat(v, starts)
    rep = np.repeat(vmax, np.diff(np.r_[starts, len(v)]))
    sums = np.add.reduceat(np.exp(v - rep), starts)
    return uniq, vmax + np.log(sums)


class BandDP:
    """Exact forward/backward tables for mu restricted to a localization band.

    Optional pins force specific particles at specific positions, which makes
    the same engine compute conditional partition functions, conditional
    samples, and conditional marginals.
    """

    def __init__(self, p: BiasMatrix, ell: LocalizationVector,
                 pins: dict | None = None, window_cap: int = DEFAULT_WINDOW_CAP):
        if p.n != ell.n:
            raise ContractError("size mismatch between bias matrix and localization")
        if not ell.is_admissible():
            raise ContractError("band DP requires an admissible localization vector")
        self.n = p.n
        self.p = p
        self.ell = ell
        self.Lm = ell.l_max_minus
        self.Lp = ell.l_max_plus
        self.W = self.Lm + self.Lp + 1
        if self.W > window_cap:
            raise CapExceeded(
                f"window width {self.W} exceeds cap {window_cap}; tighten the "
                "localization vector or raise the cap")
        self.pin_at = np.zeros(self.n + 2, dtype=np.int64)
        if pins:
            for pos, lab in pins.items():
                if not (1 <= pos <= self.n and 1 <= lab <= self.n):
                    raise ContractError(f"bad pin {pos} -> {lab}")
                self.pin_at[pos] = lab
            if len(set(pins.values())) != len(pins):
                raise ContractError("pinned particles must be distinct")
        log = p.log_dense()
        # prefix[x-1, m] = sum_{y <= m} log p[y][x]
        pref = np.zeros((self.n, self.n + 1))
        pref[:, 1:] = np.cumsum(log.T, axis=1)
        self._prefix = pref
        self._log = log
        self._lo = ell.lo
        self._hi = ell.hi
        self._fwd = None       # list of (masks, logv) per layer t = 0..n
        self._bwd = None       # list of logv arrays aligned with _fwd masks
        self._logZ = None

    # -- window helpers ----------------------------------------------------
    def _base(self, t: int) -> int:
        """Lowest window particle while choosing position t+1."""
        return t + 1 - self.Lp

    def _init_mask(self) -> int:
        base = self._base(0)
        m = 0
        for j in range(self.W):
            if base + j < 1:
                m |= 1 << j
        return m

    def _final_mask(self) -> int:
        base = self._base(self.n)
        m = 0
        for j in range(self.W):
            if 1 <= base + j <= self.n:
                m |= 1 << j
        return m

    def _slot_candidates(self, t: int):
        """Valid (slot, particle) pairs for position t+1, pins applied."""
        pos = t + 1
        base = self._base(t)
        pin = int(self.pin_at[pos])
        out = []
        for j in range(self.W):
            x = base + j
            if not 1 <= x <= self.n:
                continue
            if pin and x != pin:
                continue
            if not (x - self._lo[x - 1] <= pos <= x + self._hi[x - 1]):
                continue
            out.append((j, x))
        return out

    def _interaction_tables(self, base: int, x: int):
        """Half-word lookup tables for sum over set bits of log p[window][x]."""
        coefs = np.zeros(self.W)
        for j in range(self.W):
            y = base + j
            if 1 <= y <= self.n and y != x:
                coefs[j] = self._log[y - 1, x - 1]
        wlo = self.W // 2
        tab_lo = np.zeros(1)
        for b in range(wlo):
            tab_lo = np.concatenate([tab_lo, tab_lo + coefs[b]])
        tab_hi = np.zeros(1)
        for b in range(wlo, self.W):
            tab_hi = np.concatenate([tab_hi, tab_hi + coefs[b]])
        return tab_lo, tab_hi, wlo

    def _step_weight(self, masks: np.ndarray, base: int, x: int, tabs) -> np.ndarray:
        tab_lo, tab_hi, wlo = tabs
        pre = self._prefix[x - 1, max(base - 1, 0)]
        return pre + tab_lo[masks & ((1 << wlo) - 1)] + tab_hi[masks >> wlo]

    def _transitions(self, t: int, masks: np.ndarray):
        """Per-slot transitions from layer t: (slot, particle, sel, dst, dlogw)."""
        base = self._base(t)
        out = []
        for j, x in self._slot_candidates(t):
            sel = (masks >> j) & 1 == 0
            if j > 0:
                sel = sel & ((masks & 1) == 1)
            if not np.any(sel):
                continue
            src = masks[sel]
            tabs = self._interaction_tables(base, x)
            dw = self._step_weight(src, base, x, tabs)
            dst = (src | (1 << j)) >> 1
            out.append((j, x, sel, dst, dw))
        return out

    # -- passes ------------------------------------------------------------
    def _forward(self):
        if self._fwd is not None:
            return self._fwd
        masks = np.array([self._init_mask()], dtype=np.int64)
        logv = np.zeros(1)
        layers = [(masks, logv)]
        for t in range(self.n):
            keys, vals = [], []
            for _, _, sel, dst, dw in self._transitions(t, masks):
                keys.append(dst)
                vals.append(logv[sel] + dw)
            if keys:
                keys = np.concatenate(keys)
                vals = np.concatenate(vals)
                masks, logv = _group_logsumexp(keys, vals)
            else:
                masks = np.array([], dtype=np.int64)
                logv = np.array([])
            if masks.size == 0:
                raise EmptySupport(
                    f"no localized completion survives past position {t + 1}")
            layers.append((masks, logv))
        self._fwd = layers
        final = self._final_mask()
        idx = np.searchsorted(layers[-1][0], final)
        if idx >= layers[-1][0].size or layers[-1][0][idx] != final:
            raise EmptySupport("no path reaches the fully placed state")
        self._logZ = float(layers[-1][1][idx])
        return layers

    def _backward(self):
        if self._bwd is not None:
            return self._bwd
        layers = self._forward()
        bwd = [None] * (self.n + 1)
        final_masks = layers[self.n][0]
        b = np.full(final_masks.size, NEG_INF)
        b[np.searchsorted(final_masks, self._final_mask())] = 0.0
        bwd[self.n] = b
        for t in range(self.n - 1, -1, -1):
            masks = layers[t][0]
            nxt_masks = layers[t + 1][0]
            nxt_b = bwd[t + 1]
            b = np.full(masks.size, NEG_INF)
            for _, _, sel, dst, dw in self._transitions(t, masks):
                pos_idx = np.searchsorted(nxt_masks, dst)
                ok = (pos_idx < nxt_masks.size)
                pos_idx = np.minimum(pos_idx, nxt_masks.size - 1)
                ok &= nxt_masks[pos_idx] == dst
                contrib = np.where(ok, nxt_b[pos_idx] + dw, NEG_INF)
                b[sel] = np.logaddexp(b[sel], contrib)
            bwd[t] = b
        self._bwd = bwd
        return bwd

    # -- public operations ---------------------------------------------------
    def log_partition(self) -> float:
        self._forward()
        if not np.isfinite(self._logZ):
            raise EmptySupport("restricted partition function is zero")
        return self._logZ

    def forward_layer(self, t: int):
        """(masks, log forward weights) after t placements."""
        layers = self._forward()
        return layers[t]

    def backward_layer(self, t: int):
        """(masks, log completion weights) aligned with forward_layer(t)."""
        layers = self._forward()
        bwd = self._backward()
        return layers[t][0], bwd[t]

    def propagate(self, t0: int, t1: int, masks: np.ndarray, logv: np.ndarray):
        """Push an arbitrary layer-t0 vector forward to layer t1.

        Positions in (t0, t1] must respect this instance's pins; used to build
        bridge transfer sums between two cuts.
        """
        if not 0 <= t0 <= t1 <= self.n:
            raise ContractError("bad propagation range")
        masks = np.asarray(masks, dtype=np.int64)
        logv = np.asarray(logv, dtype=np.float64)
        for t in range(t0, t1):
            keys, vals = [], []
            for _, _, sel, dst, dw in self._transitions(t, masks):
                keys.append(dst)
                vals.append(logv[sel] + dw)
            if keys:
                masks, logv = _group_logsumexp(np.concatenate(keys),
                                               np.concatenate(vals))
            else:
                return np.array([], dtype=np.int64), np.array([])
        return masks, logv

    def cut_law(self, t: int):
        """Exact law of the placed-set word after t placements.

        Returns (masks, probs); the mask identifies the unordered set of the
        first t placed particles, which is the sufficient statistic of the
        prefix for everything to its right.
        """
        if not 0 <= t <= self.n:
            raise ContractError("cut position out of range")
        layers = self._forward()
        bwd = self._backward()
        masks, logv = layers[t]
        w = logv + bwd[t]
        finite = np.isfinite(w)
        masks = masks[finite]
        w = w[finite]
        w -= w.max()
        probs = np.exp(w)
        probs /= probs.sum()
        return masks, probs

    def sample_rows(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """(size, n) array of exact draws, one permutation per row."""
        layers = self._forward()
        bwd = self._backward()
        self.log_partition()
        R = size
        rows = np.empty((R, self.n), dtype=np.int64)
        cur = np.full(R, self._init_mask(), dtype=np.int64)
        for t in range(self.n):
            base = self._base(t)
            nxt_masks = layers[t + 1][0]
            nxt_b = bwd[t + 1]
            cands = self._slot_candidates(t)
            weights = np.full((R, len(cands)), NEG_INF)
            dsts = np.empty((R, len(cands)), dtype=np.int64)
            for c, (j, x) in enumerate(cands):
                valid = (cur >> j) & 1 == 0
                if j > 0:
                    valid &= (cur & 1) == 1
                tabs = self._interaction_tables(base, x)
                dw = self._step_weight(cur, base, x, tabs)
                dst = (cur | (1 << j)) >> 1
                idx = np.searchsorted(nxt_masks, dst)
                ok = idx < nxt_masks.size
                idx = np.minimum(idx, nxt_masks.size - 1)
                ok &= nxt_masks[idx] == dst
                w = np.where(valid & ok, dw + nxt_b[idx], NEG_INF)
                weights[:, c] = w
                dsts[:, c] = dst
            wmax = weights.max(axis=1)
            if np.any(~np.isfinite(wmax)):
                raise AssertionError("sampler reached a dead-end state")
            probs = np.exp(weights - wmax[:, None])
            cdf = np.cumsum(probs, axis=1)
            u = rng.random(R) * cdf[:, -1]
            choice = np.minimum((u[:, None] >= cdf).sum(axis=1), len(cands) - 1)
            rows[:, t] = np.array([x for _, x in cands], dtype=np.int64)[choice]
            cur = dsts[np.arange(R), choice]
        return rows

    def sample(self, rng: np.random.Generator) -> Permutation:
        return Permutation(self.sample_rows(rng, 1)[0], _validate=False)

    def region_marginal(self, region: tuple, cap_states: int = 200000) -> DistributionTable:
        """Exact joint law of the particles at positions [region[0], region[1]]."""
        a, b = region
        if not (1 <= a <= b <= self.n):
            raise ContractError("region must be a nonempty position interval")
        layers = self._forward()
        bwd = self._backward()
        logZ = self.log_partition()
        masks, logv = layers[a - 1]
        # frontier of (mask, partial assignment) pairs
        frontier = {(int(m), ()): float(v) for m, v in zip(masks, logv)
                    if np.isfinite(v)}
        for t in range(a - 1, b):
            base = self._base(t)
            new = {}
            by_mask = {}
            for (m, asg), v in frontier.items():
                by_mask.setdefault(m, []).append((asg, v))
            for j, x in self._slot_candidates(t):
                tabs = self._interaction_tables(base, x)
                for m, entries in by_mask.items():
                    if (m >> j) & 1:
                        continue
                    if j > 0 and not (m & 1):
                        continue
                    dw = float(self._step_weight(np.array([m]), base, x, tabs)[0])
                    if not math.isfinite(dw):
                        continue
                    dst = (m | (1 << j)) >> 1
                    for asg, v in entries:
                        key = (dst, asg + (x,))
                        val = v + dw
                        if key in new:
                            new[key] = float(np.logaddexp(new[key], val))
                        else:
                            new[key] = val
            frontier = new
            if len(frontier) > cap_states:
                raise CapExceeded(
                    f"region marginal needs {len(frontier)} partial states, "
                    f"cap is {cap_states}")
        end_masks = layers[b][0]
        totals = {}
        for (m, asg), v in frontier.items():
            idx = int(np.searchsorted(end_masks, m))
            if idx >= end_masks.size or end_masks[idx] != m:
                continue
            tail = float(bwd[b][idx])
            if not math.isfinite(tail):
                continue
            val = v + tail - logZ
            if asg in totals:
                totals[asg] = float(np.logaddexp(totals[asg], val))
            else:
                totals[asg] = val
        if not totals:
            raise EmptySupport("empty conditional support on the region")
        support = sorted(totals)
        probs = np.exp(np.array([totals[s] for s in support]))
        probs /= probs.sum()
        return DistributionTable(support, probs, logZ)


def band_dp_partition(p: BiasMatrix, ell: LocalizationVector,
                      window_cap: int = DEFAULT_WINDOW_CAP) -> float:
    """log of the stationary weight summed over the localized set."""
    return BandDP(p, ell, window_cap=window_cap).log_partition()


def band_dp_sample(p: BiasMatrix, ell: LocalizationVector,
                   rng: np.random.Generator, size: int | None = None,
                   window_cap: int = DEFAULT_WINDOW_CAP):
    """Exact draws from mu conditioned on the localized set."""
    dp = BandDP(p, ell, window_cap=window_cap)
    rows = dp.sample_rows(rng, 1 if size is None else size)
    if size is None:
        return Permutation(rows[0], _validate=False)
    return [Permutation(r, _validate=False) for r in rows]


def band_dp_conditional_marginal(p: BiasMatrix, ell: LocalizationVector,
                                 boundary: BoundaryAssignment, region: tuple,
                                 window_cap: int = DEFAULT_WINDOW_CAP,
                                 cap_states: int = 200000) -> DistributionTable:
    """Exact law of sigma(region) given the boundary pins and the localized set."""
    if not boundary.is_localized(ell):
        raise ContractError("boundary is not localized")
    a, b = region
    if not (boundary.i + 1 <= a <= b <= boundary.n - boundary.j):
        raise ContractError("region must sit inside the unpinned interior")
    dp = BandDP(p, ell, pins=boundary.values(), window_cap=window_cap)
    return dp.region_marginal(region, cap_states=cap_states)


# ---------------------------------------------------------------------------
# exact samplers and the strategy dispatcher
# ---------------------------------------------------------------------------

class EnumerationSampler:
    """Categorical draws from the fully enumerated restricted measure."""

    strategy = "enumeration"

    def __init__(self, p: BiasMatrix, ell: LocalizationVector | None):
        self.table = enumerate_stationary(p.n, p, ell, cap=max(ENUM_SAMPLER_CAP, p.n))
        self._rows = np.array(self.table.support, dtype=np.int64)

    def draw_rows(self, rng: np.random.Generator, size: int) -> np.ndarray:
        idx = rng.choice(len(self.table.support), size=size, p=self.table.probs)
        return self._rows[idx]


class MallowsRejectionSampler:
    """Insertion sampling for constant-bias instances, rejecting off-band draws.

    The sequential rank construction puts the g-th smallest remaining label at
    each position with probability proportional to phi^g, phi = (1-q)/q, which
    reproduces weights phi^(inversion count).  Draws violating the
    localization window are rejected, so accepted draws are exact conditional
    samples.  Acceptance is near 1 for windows wider than the displacement
    scale; a try cap guards degenerate combinations.
    """

    strategy = "mallows-rejection"

    def __init__(self, n: int, q: float, ell: LocalizationVector | None,
                 max_tries: int = 400):
        self.n = n
        self.q = q
        self.ell = ell
        self.max_tries = max_tries
        if q <= 0.0 or q >= 1.0:
            self._degenerate = np.arange(1, n + 1) if q == 1.0 else np.arange(n, 0, -1)
            self._cdfs = None
        else:
            self._degenerate = None
            phi = (1.0 - q) / q
            logphi = math.log(phi) if phi > 0 else NEG_INF
            cdfs = []
            for remaining in range(1, n + 1):
                lw = np.arange(remaining) * logphi
                w = np.exp(lw - lw.max())
                cdfs.append(np.cumsum(w) / w.sum())
            self._cdfs = cdfs

    def _propose(self, rng: np.random.Generator, size: int) -> np.ndarray:
        n = self.n
        if self._degenerate is not None:
            return np.tile(self._degenerate, (size, 1))
        u = rng.random((size, n))
        ranks = np.empty((size, n), dtype=np.int64)
        for pos in range(n):
            remaining = n - pos
            ranks[:, pos] = np.searchsorted(self._cdfs[remaining - 1], u[:, pos],
                                            side="right")
        rows = np.empty((size, n), dtype=np.int64)
        for r in range(size):
            avail = list(range(1, n + 1))
            row = rows[r]
            rk = ranks[r]
            for pos in range(n):
                row[pos] = avail.pop(rk[pos])
        return rows

    def _accept(self, rows: np.ndarray) -> np.ndarray:
        if self.ell is None:
            return np.ones(len(rows), dtype=bool)
        R, n = rows.shape
        inv = np.empty_like(rows)
        inv[np.arange(R)[:, None], rows - 1] = np.arange(1, n + 1)[None, :]
        d = inv - np.arange(1, n + 1)[None, :]
        return np.all((d >= -self.ell.lo[None, :]) & (d <= self.ell.hi[None, :]),
                      axis=1)

    def draw_rows(self, rng: np.random.Generator, size: int) -> np.ndarray:
        out = np.empty((size, self.n), dtype=np.int64)
        got = 0
        tries = 0
        while got < size:
            if tries >= self.max_tries:
                raise CapExceeded(
                    "rejection sampler acceptance too low for this localization; "
                    "use the band DP sampler")
            want = size - got
            batch = max(32, int(want * 1.1))
            rows = self._propose(rng, batch)
            keep = rows[self._accept(rows)]
            take = min(len(keep), want)
            out[got:got + take] = keep[:take]
            got += take
            tries += 1
        return out


class BandDPSampler:
    strategy = "band-dp"

    def __init__(self, p: BiasMatrix, ell: LocalizationVector,
                 window_cap: int = DEFAULT_WINDOW_CAP):
        self.dp = BandDP(p, ell, window_cap=window_cap)

    def draw_rows(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.dp.sample_rows(rng, size)


def exact_localized_sampler(p: BiasMatrix, ell: LocalizationVector | None,
                            enum_cap: int = ENUM_SAMPLER_CAP,
                            fast_window: int = FAST_WINDOW,
                            window_cap: int = DEFAULT_WINDOW_CAP):
    """Pick an exact sampler for mu(. | localized set).

    Preference order: full enumeration at tiny n, the band DP when the window
    is narrow, insertion-plus-rejection for constant-bias instances, then the
    band DP up to the hard window cap.  Raises CapExceeded when nothing exact
    is feasible (there is no general-purpose unrestricted exact sampler at
    large n).
    """
    n = p.n
    if n <= enum_cap:
        return EnumerationSampler(p, ell)
    q = p.constant_q()
    if ell is not None:
        W = ell.l_max_minus + ell.l_max_plus + 1
        if W <= fast_window:
            return BandDPSampler(p, ell, window_cap=window_cap)
        if q is not None:
            return MallowsRejectionSampler(n, q, ell)
        if W <= window_cap:
            return BandDPSampler(p, ell, window_cap=window_cap)
        raise CapExceeded(
            f"window width {W} exceeds cap {window_cap} and the instance is not "
            "constant-bias; no exact sampler available")
    if q is not None:
        return MallowsRejectionSampler(n, q, None)
    raise CapExceeded(
        "no exact sampler for a non-constant instance without a localization "
        "window at this size; run the chain instead")


def heat_bath_block_sample(sigma: Permutation, block: tuple, p: BiasMatrix,
                           ell: LocalizationVector | None,
                           rng: np.random.Generator,
                           sampler_cache: dict | None = None) -> Permutation:
    """Resample sigma on the interval block from the conditional measure.

    The complement assignment is turned into a boundary, the interior is
    relabeled to a standalone instance (which stays epsilon-positively
    biased), an exact conditional draw is taken there, and the draw is
    embedded back.  sigma outside the block is untouched.
    """
    rows = heat_bath_block_rows(sigma, block, p, ell, rng, 1, sampler_cache)
    return Permutation(rows[0], _validate=False)


def heat_bath_block_rows(sigma: Permutation, block: tuple, p: BiasMatrix,
                         ell: LocalizationVector | None,
                         rng: np.random.Generator, size: int,
                         sampler_cache: dict | None = None) -> np.ndarray:
    a, b = block
    n = sigma.n
    if not (1 <= a <= b <= n):
        raise ContractError("block must be a nonempty position interval")
    if ell is not None and not is_localized(sigma, ell):
        raise ContractError("state is outside the localized set")
    boundary = BoundaryAssignment.from_permutation(sigma, a - 1, n - b)
    key = None
    sampler = None
    if sampler_cache is not None:
        key = (block, tuple(boundary.left), tuple(boundary.right))
        sampler = sampler_cache.get(key)
    if sampler is None:
        sub_p, sub_ell, r = restrict_instance(boundary, p, ell)
        sampler = (exact_localized_sampler(sub_p, sub_ell), r)
        if sampler_cache is not None:
            sampler_cache[key] = sampler
    sub_sampler, r = sampler
    sub_rows = sub_sampler.draw_rows(rng, size)
    rows = np.tile(sigma.forward, (size, 1))
    rows[:, a - 1:b] = r[sub_rows - 1]
    return rows
