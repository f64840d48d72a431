"""Scalar quantization of surviving parameters.

Three level-placement schemes map weights to b-bit codes:

* uniform_scale: levels i*delta for signed codes i, zero exactly representable,
  only a scale factor needs storing; out-of-range weights clip.
* uniform_affine: 2^bits equally spaced levels pinned to the weight min/max;
  min and scale need storing, nothing clips.
* optimal_density: levels placed to minimize the expected absolute rounding
  error under the weight density, so spacing tightens where weights are dense
  and stretches across sparse regions. At each interior level the optimum
  balances the probability mass of the two adjacent half-regions; the solver
  is a damped Newton pass on that system from several starting placements,
  keeping the lowest-error solution.

Rounding is nearest (ties to the lower level) or stochastic (round up with
probability proportional to the distance from the lower level; unbiased in
expectation). Dequantization is a lookup into the level table, so zeros never
occupy a code: pruned positions live in the sparsity mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from .nn import Network
from .sparsity import SparsityMask
from .evolution import DivergenceSpec, divergence

SCHEMES = ("uniform_scale", "uniform_affine", "optimal_density", "identity")
ROUNDINGS = ("nearest", "stochastic")

DENSITY_FLOOR_RATIO = 1e-6  # of the peak height; keeps level spacing finite


class LevelSolverError(RuntimeError):
    """Optimal level placement failed to converge; carries the best residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass
class Density:
    """Histogram-backed weight density: linear interpolation of bin heights,
    floored at a small fraction of the peak so spacing stays finite across
    empty regions. Bin masses are normalized to total 1."""

    edges: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        if self.edges.ndim != 1 or self.masses.shape != (self.edges.size - 1,):
            raise ValueError("need bins+1 edges and bins masses")
        if (np.diff(self.edges) <= 0).any():
            raise ValueError("bin edges must be strictly increasing")
        if (self.masses < 0).any():
            raise ValueError("bin masses must be nonnegative")
        total = float(self.masses.sum())
        if not math.isclose(total, 1.0, abs_tol=1e-9):
            raise ValueError(f"bin masses must sum to 1, got {total}")
        widths = np.diff(self.edges)
        self._centers = (self.edges[:-1] + self.edges[1:]) / 2.0
        self._heights = self.masses / widths
        self.floor = DENSITY_FLOOR_RATIO * float(self._heights.max())
        if self.floor <= 0:
            raise ValueError("density has no mass")
        self._flatten()

    def _flatten(self):
        """Resolve the floor clamp into explicit nodes so p is exactly linear
        between consecutive nodes (the solver and the integrator both rely on
        this)."""
        lo, hi = float(self.edges[0]), float(self.edges[-1])
        xs = np.concatenate(([lo], self._centers, [hi]))
        hs = np.concatenate(([self._heights[0]], self._heights,
                             [self._heights[-1]]))
        nodes = [xs[0]]
        vals = [max(hs[0], self.floor)]
        f = self.floor
        for a, b, ha, hb in zip(xs[:-1], xs[1:], hs[:-1], hs[1:]):
            if (ha - f) * (hb - f) < 0:  # segment crosses the floor
                cross = a + (f - ha) * (b - a) / (hb - ha)
                if a < cross < b:
                    nodes.append(cross)
                    vals.append(f)
            nodes.append(b)
            vals.append(max(hb, f))
        self._nodes = np.asarray(nodes)
        self._node_heights = np.asarray(vals)

    @classmethod
    def from_samples(cls, values: np.ndarray, bins: int = 256) -> "Density":
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size == 0:
            raise ValueError("cannot build a density from no samples")
        lo, hi = float(values.min()), float(values.max())
        if lo == hi:
            raise ValueError("degenerate support: all samples equal")
        counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
        return cls(edges, counts / values.size)

    @property
    def support(self) -> tuple[float, float]:
        return float(self.edges[0]), float(self.edges[-1])

    def pdf(self, w: float) -> float:
        """Scalar evaluation; clamped outside the support."""
        return float(np.interp(w, self._nodes, self._node_heights))

    def pdf_array(self, w: np.ndarray) -> np.ndarray:
        return np.interp(w, self._nodes, self._node_heights)

    def breakpoints(self) -> np.ndarray:
        """Points where the density changes slope (floor clamps included)."""
        return self._nodes

    def mass_to(self, w) -> np.ndarray:
        """Exact integral of the (piecewise-linear) density from the support
        start to w; vectorized."""
        nodes = self._nodes
        heights = self._node_heights
        if not hasattr(self, "_cum"):
            seg = np.diff(nodes) * (heights[:-1] + heights[1:]) / 2.0
            self._cum = np.concatenate(([0.0], np.cumsum(seg)))
        w = np.clip(np.asarray(w, dtype=np.float64), nodes[0], nodes[-1])
        j = np.clip(np.searchsorted(nodes, w, side="right") - 1, 0, nodes.size - 2)
        return self._cum[j] + (w - nodes[j]) * (heights[j] + self.pdf_array(w)) / 2.0

    def mass(self, a, b) -> np.ndarray:
        return self.mass_to(b) - self.mass_to(a)

    def inverse_mass(self, q) -> np.ndarray:
        """Position x with mass_to(x) == q; vectorized, exact per linear
        piece (quadratic inversion, cancellation-safe root)."""
        self.mass_to(self._nodes[0])  # ensure the cumulative table exists
        nodes = self._nodes
        heights = self._node_heights
        cum = self._cum
        q = np.clip(np.asarray(q, dtype=np.float64), 0.0, cum[-1])
        j = np.clip(np.searchsorted(cum, q, side="right") - 1, 0, nodes.size - 2)
        dq = q - cum[j]
        h = heights[j]
        s = (heights[j + 1] - heights[j]) / (nodes[j + 1] - nodes[j])
        disc = np.maximum(h * h + 2.0 * s * dq, 0.0)
        t = 2.0 * dq / (h + np.sqrt(disc))
        return nodes[j] + t


def uniform_density(lo: float, hi: float, bins: int = 16) -> Density:
    edges = np.linspace(lo, hi, bins + 1)
    return Density(edges, np.full(bins, 1.0 / bins))


# ---------------------------------------------------------------------------
# Level placement
# ---------------------------------------------------------------------------

def uniform_levels(w_min: float, w_max: float, bits: int, scheme: str) -> np.ndarray:
    """Equally spaced level tables; see the module docstring for the two
    variants. A degenerate range yields a single-level table (the caller
    flags it)."""
    if bits < 1:
        raise ValueError("bits must be >= 1")
    if w_min > w_max:
        raise ValueError(f"w_min {w_min} > w_max {w_max}")
    if w_min == w_max:
        return np.array([w_min])
    if scheme == "uniform_affine":
        return np.linspace(w_min, w_max, 2 ** bits)
    if scheme == "uniform_scale":
        if bits < 2:
            raise ValueError("uniform_scale needs bits >= 2 (scale is undefined)")
        half = 2 ** (bits - 1)
        delta = max(abs(w_min), abs(w_max)) / (half - 1)
        return np.arange(-half, half, dtype=np.float64) * delta
    raise ValueError(f"unknown uniform scheme {scheme!r}")


def mass_balance(levels: np.ndarray, density: Density) -> np.ndarray:
    """Per interior level: mass of [left midpoint, level] minus mass of
    [level, right midpoint]. Zero everywhere exactly when the level set is a
    stationary point of the rounding-error integral."""
    levels = np.asarray(levels, dtype=np.float64)
    mids = (levels[:-1] + levels[1:]) / 2.0
    inner = levels[1:-1]
    return density.mass(mids[:-1], inner) - density.mass(inner, mids[1:])


def _quantile_levels(density: Density, n_levels: int, power: float = 1.0) -> np.ndarray:
    """Levels at equal-quantile positions of density**power (Newton starting
    points; power 0.5 approximates the asymptotically optimal placement)."""
    nodes = density._nodes
    heights = density._node_heights ** power
    seg = np.diff(nodes) * (heights[:-1] + heights[1:]) / 2.0
    cdf = np.concatenate(([0.0], np.cumsum(seg)))
    cdf /= cdf[-1]
    targets = np.linspace(0.0, 1.0, n_levels)
    levels = np.interp(targets, cdf, nodes)
    lo, hi = density.support
    levels[0], levels[-1] = lo, hi
    # nudge any coincident interior levels apart
    for i in range(1, levels.size):
        if levels[i] <= levels[i - 1]:
            levels[i] = levels[i - 1] + 1e-9 * (hi - lo)
    return levels


def _newton_balance(levels: np.ndarray, density: Density,
                    iters: int = 200) -> tuple[np.ndarray, float]:
    """Damped Newton on the half-mass balance system over all interior levels
    (tridiagonal Jacobian). Returns (levels, max residual)."""
    lo, hi = density.support
    span = hi - lo
    x = levels.copy()
    n = x.size

    def norm(v):
        return float(np.abs(v).max()) if v.size else 0.0

    best = x.copy()
    best_norm = norm(mass_balance(x, density))
    for _ in range(iters):
        F = mass_balance(x, density)
        fn = norm(F)
        if fn < best_norm:
            best_norm = fn
            best = x.copy()
        if fn <= 1e-16:
            break
        mids = (x[:-1] + x[1:]) / 2.0
        p_mid = density.pdf_array(mids)
        p_lvl = density.pdf_array(x)
        m = n - 2
        J = np.zeros((m, m))
        for i in range(m):  # unknown x[i+1]
            if i > 0:
                J[i, i - 1] = -p_mid[i] / 2.0
            J[i, i] = 2.0 * p_lvl[i + 1] - p_mid[i] / 2.0 - p_mid[i + 1] / 2.0
            if i < m - 1:
                J[i, i + 1] = -p_mid[i + 1] / 2.0
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            break
        alpha = 1.0
        improved = False
        for _ in range(50):
            trial = x.copy()
            trial[1:-1] = x[1:-1] + alpha * step
            if (np.diff(trial) > 1e-15 * span).all():
                if norm(mass_balance(trial, density)) < fn:
                    x = trial
                    improved = True
                    break
            alpha /= 2.0
        if not improved:
            break
    fn = norm(mass_balance(x, density))
    if fn < best_norm:
        best_norm = fn
        best = x.copy()
    return best, best_norm


def _median_pass(levels: np.ndarray, density: Density,
                 iters: int = 3000) -> np.ndarray:
    """Alternate rounding boundaries (gap midpoints) and per-region medians.
    Each half-step lowers the error integral, so progress is monotone; the
    fixed point is exactly the half-mass balance. Keeps levels strictly
    ordered because a region's median lies strictly inside it."""
    lo, hi = density.support
    span = hi - lo
    x = levels.copy()
    for _ in range(iters):
        mids = (x[:-1] + x[1:]) / 2.0
        cuts = density.mass_to(mids)
        targets = (cuts[:-1] + cuts[1:]) / 2.0
        new_inner = density.inverse_mass(targets)
        move = float(np.abs(new_inner - x[1:-1]).max())
        x[1:-1] = new_inner
        if move <= 1e-16 * span:
            break
    return x


# Worst accepted half-mass imbalance, as a fraction of the mean region mass.
# Smooth tables converge to machine precision; histograms with as many kinks
# as levels are semismooth and settle around 1e-5, where the residual's
# effect on the error integral is far below any quantization effect.
BALANCE_TOL_RATIO = 1e-4


def _refine(init: np.ndarray, density: Density, gate: float):
    """Chunked median passes with opportunistic Newton polish; returns the
    best (levels, residual) seen."""
    x = init.copy()
    best = x
    best_res = float(np.abs(mass_balance(x, density)).max())
    polish_every_chunk = x.size <= 32  # Newton is nearly free on coarse tables
    for _ in range(30):
        before = best_res
        x = _median_pass(x, density, iters=2000)
        res = float(np.abs(mass_balance(x, density)).max())
        if res < best_res:
            best, best_res = x.copy(), res
        stalled = best_res > 0.5 * before
        if polish_every_chunk or stalled:
            nx, nres = _newton_balance(x, density, iters=40)
            if nres < best_res and (np.diff(nx) > 0).all():
                best, best_res = nx, nres
                x = nx.copy()
        if best_res <= 0.01 * gate:
            break
        if best_res <= gate and best_res > 0.5 * before:
            break  # inside the gate and no longer improving
    return best, best_res


def solve_levels(density: Density, n_levels: int) -> np.ndarray:
    """n strictly increasing levels from w_min to w_max minimizing the
    expected absolute rounding error: at every interior level the adjacent
    half-region masses balance. Median passes from several starting
    placements (uniform, equal-mass, sqrt-density), polished by Newton; the
    lowest-error converged solution wins, so the result never loses to plain
    uniform spacing."""
    if n_levels < 2:
        raise ValueError("need at least 2 levels")
    lo, hi = density.support
    if n_levels == 2:
        return np.array([lo, hi])
    gate = BALANCE_TOL_RATIO / (n_levels - 1)
    quantiles = _quantile_levels(density, n_levels)
    inits = [
        np.linspace(lo, hi, n_levels),
        quantiles,
        _mirror(quantiles, lo, hi),  # breaks ties on symmetric densities
    ]
    if n_levels <= 32:  # coarse tables have distinct basins worth probing
        inits.append(_quantile_levels(density, n_levels, power=0.5))
    if n_levels <= 4:
        # interior placements are few enough to scan outright; the best grid
        # configuration seeds Newton inside the global basin
        inits.append(_prescan(density, n_levels))
    best = None
    best_err = math.inf
    least_res = math.inf
    for init in inits:
        levels, res = _refine(init, density, gate)
        least_res = min(least_res, res)
        if res <= gate and (np.diff(levels) > 0).all():
            err = quantization_error(levels, density)
            if err < best_err:
                best_err = err
                best = levels
    if best is None:
        raise LevelSolverError(
            f"half-mass balance did not converge (best residual {least_res:.3e}, "
            f"tolerance {gate:.3e})", residual=least_res,
        )
    return best


def _mirror(levels: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return (lo + hi) - levels[::-1]


def _prescan(density: Density, n_levels: int, grid_points: int = 48) -> np.ndarray:
    """Exhaustive coarse placement for 3 or 4 levels."""
    lo, hi = density.support
    grid = np.linspace(lo, hi, grid_points + 2)[1:-1]
    best = None
    best_err = math.inf
    if n_levels == 3:
        for g in grid:
            err = quantization_error(np.array([lo, g, hi]), density)
            if err < best_err:
                best_err = err
                best = np.array([lo, g, hi])
    else:
        for i, g1 in enumerate(grid[:-1]):
            for g2 in grid[i + 1:]:
                err = quantization_error(np.array([lo, g1, g2, hi]), density)
                if err < best_err:
                    best_err = err
                    best = np.array([lo, g1, g2, hi])
    return best


def optimal_levels(density: Density, bits: int) -> np.ndarray:
    """Error-minimizing table of 2^bits levels (endpoints pinned to the
    support)."""
    if bits < 1:
        raise ValueError("bits must be >= 1")
    return solve_levels(density, 2 ** bits)


def placement_residual(levels: np.ndarray, density: Density):
    """Max difference between consecutive gap * density(gap midpoint)
    products, plus their mean. This is the first-order spacing heuristic
    (spacing inversely proportional to density); the exact optimality residual
    is mass_balance."""
    levels = np.asarray(levels, dtype=np.float64)
    gaps = np.diff(levels)
    mids = (levels[:-1] + levels[1:]) / 2.0
    prods = gaps * density.pdf_array(mids)
    c = float(prods.mean())
    if prods.size < 2:
        return 0.0, c
    return float(np.abs(np.diff(prods)).max()), c


# ---------------------------------------------------------------------------
# Error functional
# ---------------------------------------------------------------------------

def quantization_error(levels: np.ndarray, density: Density) -> float:
    """Expected |w - nearest level| under the density, integrated over the
    support. Piecewise-Simpson on a grid refined at every density breakpoint,
    level, and rounding boundary (12 subintervals each), which is exact for
    the piecewise-quadratic integrand."""
    levels = np.asarray(levels, dtype=np.float64)
    if levels.size < 2:
        raise ValueError("need at least 2 levels")
    if (np.diff(levels) <= 0).any():
        raise ValueError("levels must be strictly increasing")
    lo, hi = density.support
    mids = (levels[:-1] + levels[1:]) / 2.0
    knots = np.concatenate((density.breakpoints(), levels, mids))
    knots = np.unique(np.clip(knots, lo, hi))
    starts, widths = knots[:-1], np.diff(knots)
    m = 12
    t = np.arange(m + 1) / m
    pts = starts[:, None] + widths[:, None] * t[None, :]

    def f(w):
        idx = np.searchsorted(mids, w, side="left")
        dist = np.abs(w - levels[idx])
        return dist * density.pdf_array(w)

    left, right = pts[:, :-1], pts[:, 1:]
    mid = (left + right) / 2.0
    seg = (right - left) / 6.0 * (f(left) + 4.0 * f(mid) + f(right))
    return float(seg.sum())


# ---------------------------------------------------------------------------
# Quantize / dequantize
# ---------------------------------------------------------------------------

@dataclass
class QuantizationSpec:
    scheme: str
    bits: int
    rounding: str
    levels: np.ndarray
    seed: int = 0
    degenerate: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.rounding not in ROUNDINGS:
            raise ValueError(f"unknown rounding {self.rounding!r}")
        self.levels = np.asarray(self.levels, dtype=np.float64)
        if self.levels.ndim != 1 or self.levels.size < 1:
            raise ValueError("levels must be a nonempty 1-D array")
        if (np.diff(self.levels) <= 0).any():
            raise ValueError("levels must be strictly increasing")
        if self.scheme != "identity" and not self.degenerate \
                and self.levels.size != 2 ** self.bits:
            raise ValueError(
                f"{self.scheme} expects {2 ** self.bits} levels, "
                f"got {self.levels.size}"
            )


def build_spec(values: np.ndarray, scheme: str, bits: int,
               rounding: str = "nearest", seed: int = 0,
               density_bins: int = 256) -> QuantizationSpec:
    """Level table for a concrete set of surviving weights."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("cannot quantize an empty surviving set")
    w_min, w_max = float(values.min()), float(values.max())
    if scheme == "identity":
        levels = np.unique(values)
        eff_bits = max(1, math.ceil(math.log2(levels.size)) if levels.size > 1 else 1)
        return QuantizationSpec("identity", eff_bits, rounding, levels, seed,
                                degenerate=levels.size == 1)
    if w_min == w_max:
        return QuantizationSpec(scheme, 0, rounding, np.array([w_min]), seed,
                                degenerate=True)
    if scheme in ("uniform_scale", "uniform_affine"):
        levels = uniform_levels(w_min, w_max, bits, scheme)
    elif scheme == "optimal_density":
        density = Density.from_samples(values, density_bins)
        levels = optimal_levels(density, bits)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return QuantizationSpec(scheme, bits, rounding, levels, seed)


def quantize(weights: np.ndarray, mask_bits: Optional[np.ndarray],
             spec: QuantizationSpec) -> np.ndarray:
    """Codes for the surviving weights, in flat-index order. Masked positions
    produce no code (their zeros live in the mask)."""
    flat = np.asarray(weights, dtype=np.float64).reshape(-1)
    if mask_bits is not None:
        flat = flat[~np.asarray(mask_bits, dtype=bool)]
    if flat.size == 0:
        raise ValueError("no surviving weights to quantize")
    levels = spec.levels
    if levels.size == 1:
        return np.zeros(flat.size, dtype=np.uint32)
    if spec.rounding == "nearest":
        mids = (levels[:-1] + levels[1:]) / 2.0
        codes = np.searchsorted(mids, flat, side="left")
    else:
        w = np.clip(flat, levels[0], levels[-1])
        hi = np.searchsorted(levels, w, side="left")
        hi = np.maximum(hi, 1)
        low = levels[hi - 1]
        high = levels[hi]
        p_up = (w - low) / (high - low)
        rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 0xD1CE]))
        codes = hi - 1 + (rng.random(w.size) < p_up)
    return codes.astype(np.uint32)


def dequantize(codes: np.ndarray, spec: QuantizationSpec) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() >= spec.levels.size):
        raise ValueError(
            f"code out of range for a {spec.levels.size}-entry level table"
        )
    return spec.levels[codes]


# ---------------------------------------------------------------------------
# Whole-network quantization
# ---------------------------------------------------------------------------

@dataclass
class LayerQuantization:
    layer: int
    spec: QuantizationSpec
    codes: np.ndarray


@dataclass
class QuantizedModel:
    network: Network
    mask: SparsityMask
    layers: list[LayerQuantization]


def _surviving(net: Network, mask: SparsityMask, layer: int):
    flat = np.concatenate([t.reshape(-1) for t in net.layers[layer].param_tensors()])
    bits = mask.layer_bits(layer)
    return flat, bits


def quantize_network(student: Network, mask: SparsityMask,
                     scheme: str = "uniform_affine", bits: int = 8,
                     rounding: str = "nearest", seed: int = 0,
                     per_layer: Optional[dict] = None,
                     dataset=None, teacher_outputs: Optional[np.ndarray] = None,
                     probe=None, div_spec: Optional[DivergenceSpec] = None):
    """Quantize every parameter layer with its own level table; returns the
    dequantized model plus a report of the accuracy/divergence deltas."""
    mask.check_compatible(student)
    per_layer = per_layer or {}
    quants: list[LayerQuantization] = []
    layers = list(student.layers)
    for i in student.param_layer_indices():
        overrides = per_layer.get(i, {})
        l_scheme = overrides.get("scheme", scheme)
        l_bits = int(overrides.get("bits", bits))
        l_rounding = overrides.get("rounding", rounding)
        flat, mask_bits = _surviving(student, mask, i)
        layer_seed = int(np.random.SeedSequence([int(seed), i]).generate_state(1)[0])
        if not (~mask_bits).any():
            # fully pruned layer: no codes, a placeholder single-entry table
            spec = QuantizationSpec(l_scheme, 0, l_rounding, np.array([0.0]),
                                    layer_seed, degenerate=True)
            codes = np.empty(0, dtype=np.uint32)
            restored = np.zeros_like(flat)
        else:
            spec = build_spec(flat[~mask_bits], l_scheme, l_bits, l_rounding,
                              seed=layer_seed)
            codes = quantize(flat, mask_bits, spec)
            restored = np.zeros_like(flat)
            restored[~mask_bits] = dequantize(codes, spec)
        tensors = student.layers[i].param_tensors()
        new, off = [], 0
        for t in tensors:
            new.append(restored[off:off + t.size].reshape(t.shape))
            off += t.size
        layers[i] = student.layers[i].with_params(new)
        quants.append(LayerQuantization(i, spec, codes))
    qnet = Network(layers, student.input_shape)
    model = QuantizedModel(qnet, mask, quants)

    report = {}
    if dataset is not None:
        report["accuracy_before"] = nn.accuracy(student, dataset)
        report["accuracy_after"] = nn.accuracy(qnet, dataset)
        report["accuracy_delta"] = report["accuracy_after"] - report["accuracy_before"]
    if teacher_outputs is not None and probe is not None:
        if div_spec is None:
            div_spec = DivergenceSpec.whole_output(teacher_outputs.shape[1])
        report["divergence_before"] = divergence(
            nn.forward(student, probe.inputs), teacher_outputs, div_spec)
        report["divergence_after"] = divergence(
            nn.forward(qnet, probe.inputs), teacher_outputs, div_spec)
    return model, report
