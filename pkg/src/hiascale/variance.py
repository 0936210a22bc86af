"""Variance components of baseline mortality rates across year and the census hierarchy.

Model, one row per (block, year) observation::

    y = mu + u_year + u_county + u_tract + u_block_group + u_block + e

Year is crossed with the nested spatial chain. Components are estimated by
EM for REML (``mu`` carries a flat prior). The E-step is exact: the spatial
effects form a tree-structured Gaussian, handled by an upward/downward pass
over the hierarchy, and the crossed (mu, year) block is folded in through
its Schur complement.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np
from scipy import sparse

from .geo import UnitLevel, validate_geoid

LEVELS = ("year", "county", "tract", "block_group", "block")
_SPATIAL = ("county", "tract", "block_group", "block")
_PREFIX = {"county": 5, "tract": 11, "block_group": 12, "block": 15}


class DesignError(ValueError):
    pass


@dataclass(frozen=True)
class BMRObservation:
    year: int
    block: str
    bmr: float


@dataclass
class VarianceDecomposition:
    variances: dict[str, float]
    residual_variance: float
    proportions: dict[str, float] | None
    iterations: int
    converged: bool
    n_obs: int
    flag: str = ""

    def write_csv(self, stream: IO[str]) -> None:
        w = csv.writer(stream, lineterminator="\n")
        header = [f"var_{k}" for k in LEVELS] + ["var_residual"]
        header += [f"pct_{k}" for k in LEVELS] + ["iterations", "converged", "n_obs", "flag"]
        w.writerow(header)
        row = [repr(self.variances[k]) for k in LEVELS] + [repr(self.residual_variance)]
        if self.proportions is None:
            row += [""] * len(LEVELS)
        else:
            row += [repr(self.proportions[k]) for k in LEVELS]
        row += [self.iterations, int(self.converged), self.n_obs, self.flag]
        w.writerow(row)


def proportions_of(variances: dict[str, float]) -> dict[str, float] | None:
    """Percent of the summed five-level variance at each level (residual excluded)."""
    total = math.fsum(variances[k] for k in LEVELS)
    if total <= 0:
        return None
    return {k: 100.0 * variances[k] / total for k in LEVELS}


class _Design:
    """Index structures for the crossed year × nested spatial design."""

    def __init__(self, years: np.ndarray, blocks: Sequence[str], y: np.ndarray):
        self.year_ids, self.t = np.unique(years, return_inverse=True)
        block_ids, self.b = np.unique(np.asarray(blocks, dtype=str), return_inverse=True)
        for geoid in block_ids:
            validate_geoid(str(geoid), UnitLevel.BLOCK)
        self.n_years = len(self.year_ids)
        self.y = y
        self.n = len(y)

        # node tables, coarse to fine; parent index of each node on the level above
        self.parent = {}
        ids_by_level = {"block": block_ids}
        for lvl in ("block_group", "tract", "county"):
            ids_by_level[lvl] = np.unique([g[: _PREFIX[lvl]] for g in block_ids])
        for upper, lower in zip(_SPATIAL, _SPATIAL[1:]):
            up_ids = ids_by_level[upper]
            low_ids = ids_by_level[lower]
            prefix = np.array([g[: _PREFIX[upper]] for g in low_ids])
            self.parent[lower] = np.searchsorted(up_ids, prefix)
        self.sizes = {lvl: len(ids_by_level[lvl]) for lvl in _SPATIAL}

        # sparse child→parent summation operators
        self.up = {}
        for lower, par in self.parent.items():
            upper = _SPATIAL[_SPATIAL.index(lower) - 1]
            n_low = self.sizes[lower]
            self.up[lower] = sparse.csr_matrix(
                (np.ones(n_low), (par, np.arange(n_low))), shape=(self.sizes[upper], n_low)
            )

        nb, ny = self.sizes["block"], self.n_years
        cell = self.b * ny + self.t
        self.n_bt = np.bincount(cell, minlength=nb * ny).reshape(nb, ny).astype(float)
        self.n_b = self.n_bt.sum(axis=1)
        self.n_t = self.n_bt.sum(axis=0)
        # crossed design summary per block: [n_b, n_b1, ..., n_bT]
        self.X_b = np.hstack([self.n_b[:, None], self.n_bt])
        self.ysum_b = np.bincount(self.b, weights=y, minlength=nb)
        self.ysum_t = np.bincount(self.t, weights=y, minlength=ny)


def _tree_solve(d: _Design, k: dict, J_block: np.ndarray, H_block: np.ndarray):
    """Solve the spatial precision system for several right-hand sides.

    Works in cumulative coordinates s_node = Σ effects on the path from the
    county down to the node. Returns, per level, the solution rows, the
    marginal variances V of s, the regression factor a linking each node to
    its parent (Cov(s_i, s_parent) = a_i · V_parent) and the conditional
    variance c of each node given its parent.
    """
    J = {"block": J_block}
    H = {"block": H_block}
    a = {}
    for lower in ("block", "block_group", "tract"):
        upper = _SPATIAL[_SPATIAL.index(lower) - 1]
        a[lower] = k[lower] / (k[lower] + J[lower])
        J[upper] = d.up[lower] @ (a[lower] * J[lower])
        H[upper] = d.up[lower] @ (a[lower][:, None] * H[lower])
    prec_c = J["county"] + k["county"]
    a["county"] = np.zeros_like(prec_c)
    mean = {"county": H["county"] / prec_c[:, None]}
    var = {"county": 1.0 / prec_c}
    cvar = {"county": var["county"]}
    for lower in ("tract", "block_group", "block"):
        upper = _SPATIAL[_SPATIAL.index(lower) - 1]
        par = d.parent[lower]
        denom = J[lower] + k[lower]
        mean[lower] = (H[lower] + k[lower][:, None] * mean[upper][par]) / denom[:, None]
        cvar[lower] = 1.0 / denom
        var[lower] = a[lower] ** 2 * var[upper][par] + cvar[lower]
    return mean, var, a, cvar


def _em_step(d: _Design, theta: dict) -> tuple[dict, float]:
    ny = d.n_years
    m = ny + 1
    lam = 1.0 / theta["residual"]
    k = {lvl: np.full(d.sizes[lvl], 1.0 / theta[lvl]) for lvl in _SPATIAL}

    # right-hand sides on blocks: columns for (mu, years) coupling, then data
    H_block = lam * np.hstack([d.X_b, d.ysum_b[:, None]])
    sol, V, a, C = _tree_solve(d, k, lam * d.n_b, H_block)
    M = {lvl: sol[lvl][:, :m] for lvl in _SPATIAL}
    s0 = {lvl: sol[lvl][:, m] for lvl in _SPATIAL}

    Q_ww = np.zeros((m, m))
    Q_ww[0, 0] = lam * d.n
    Q_ww[0, 1:] = Q_ww[1:, 0] = lam * d.n_t
    Q_ww[1:, 1:] = np.diag(lam * d.n_t + 1.0 / theta["year"])
    Q_ws = lam * d.X_b.T
    S = Q_ww - Q_ws @ M["block"]
    S = 0.5 * (S + S.T)
    h_w = lam * np.concatenate([[d.y.sum()], d.ysum_t])
    g = h_w - Q_ws @ s0["block"]
    A = np.linalg.inv(S)
    Ew = A @ g

    new = {}
    v = Ew[1:]
    new["year"] = float(np.mean(v**2 + np.diag(A)[1:]))

    Es = {lvl: s0[lvl] - M[lvl] @ Ew for lvl in _SPATIAL}
    for lvl in _SPATIAL:
        if lvl == "county":
            Eu = Es[lvl]
            var_tree = V[lvl]
            D = M[lvl]
        else:
            upper = _SPATIAL[_SPATIAL.index(lvl) - 1]
            par = d.parent[lvl]
            Eu = Es[lvl] - Es[upper][par]
            # Var(s_i - s_p), written to avoid cancellation when a -> 1
            var_tree = (1.0 - a[lvl]) ** 2 * V[upper][par] + C[lvl]
            D = M[lvl] - M[upper][par]
        var_u = var_tree + np.einsum("ij,jk,ik->i", D, A, D)
        new[lvl] = float(np.mean(Eu**2 + var_u))

    fit = Ew[0] + Ew[1:][d.t] + Es["block"][d.b]
    ssr = float(np.dot(d.y - fit, d.y - fit))
    diagA = np.diag(A)
    xAx = diagA[0] + 2.0 * A[0, 1:] + diagA[1:]
    Mb = M["block"]
    trace = (
        float(np.dot(d.n_t, xAx))
        - 2.0 * float(np.sum(Mb * (d.X_b @ A)))
        + float(np.dot(d.n_b, np.einsum("ij,jk,ik->i", Mb, A, Mb)))
        + float(np.dot(d.n_b, V["block"]))
    )
    new["residual"] = (ssr + trace) / d.n
    return new, float(Ew[0])


def decompose_arrays(
    years: Iterable[int],
    blocks: Iterable[str],
    values: Iterable[float],
    tol: float = 1e-8,
    max_iter: int = 500,
) -> VarianceDecomposition:
    years = np.asarray(list(years))
    blocks = [str(b) for b in blocks]
    y = np.asarray(list(values), dtype=np.float64)
    if not (len(years) == len(blocks) == len(y)):
        raise ValueError("years, blocks and values must have equal length")
    if not np.isfinite(y).all():
        raise ValueError("BMR values must be finite")
    if len(np.unique(years)) < 2 or len(set(blocks)) < 2:
        raise DesignError("unidentifiable component: need at least 2 years and 2 blocks")

    # canonical order so every reduction is independent of input order
    order = np.lexsort((y, years, np.asarray(blocks)))
    years, y = years[order], y[order]
    blocks = [blocks[i] for i in order]
    d = _Design(years, blocks, y - y.mean())
    total = float(np.var(d.y))
    if total == 0.0:
        zeros = {k: 0.0 for k in LEVELS}
        return VarianceDecomposition(zeros, 0.0, None, 0, True, d.n, "zero total variance")

    floor = 1e-12 * total
    keys = (*LEVELS, "residual")

    def em_map(x: np.ndarray) -> np.ndarray:
        out, _ = _em_step(d, dict(zip(keys, x)))
        return np.maximum([out[k] for k in keys], floor)

    def settled(x_old: np.ndarray, x_new: np.ndarray) -> bool:
        return float(np.max(np.abs(x_new - x_old)) / np.sum(x_new)) < tol

    # EM with SQUAREM extrapolation; every em_map call counts as an iteration
    x = np.full(len(keys), total / 6.0)
    step_max = 4.0
    converged = False
    it = 0
    while it < max_iter:
        x1 = em_map(x)
        it += 1
        if settled(x, x1) or it >= max_iter:
            x, converged = x1, settled(x, x1)
            break
        x2 = em_map(x1)
        it += 1
        if settled(x1, x2) or it >= max_iter:
            x, converged = x2, settled(x1, x2)
            break
        r = x1 - x
        v = x2 - x1 - r
        nv = float(np.linalg.norm(v))
        if nv == 0.0:
            x = x2
            continue
        alpha = min(step_max, float(np.linalg.norm(r)) / nv)
        if alpha <= 1.0:
            x = x2
            continue
        if alpha == step_max:
            step_max *= 4.0
        x_jump = np.maximum(x + 2.0 * alpha * r + alpha**2 * v, floor)
        try:
            x3 = em_map(x_jump)
        except np.linalg.LinAlgError:
            x3 = None
        it += 1
        if x3 is None or not np.isfinite(x3).all():
            x = x2
            continue
        x = x3
        if settled(x_jump, x3):
            converged = True
            break
    theta = dict(zip(keys, x.tolist()))

    variances = {k: (theta[k] if theta[k] > floor else 0.0) for k in LEVELS}
    residual = theta["residual"] if theta["residual"] > floor else 0.0
    props = proportions_of(variances)
    flag = "" if props is not None else "zero total variance"
    if not converged:
        flag = (flag + "; " if flag else "") + f"not converged after {max_iter} iterations"
    return VarianceDecomposition(variances, residual, props, it, converged, d.n, flag)


def decompose(observations: Iterable[BMRObservation], tol: float = 1e-8, max_iter: int = 500) -> VarianceDecomposition:
    obs = list(observations)
    for o in obs:
        if o.bmr < 0:
            raise ValueError(f"negative BMR for {o.block}/{o.year}")
    return decompose_arrays(
        [o.year for o in obs], [o.block for o in obs], [o.bmr for o in obs], tol, max_iter
    )


def read_observations_csv(stream: IO[str]) -> list[BMRObservation]:
    """``year,block,bmr`` rows."""
    reader = csv.DictReader(stream)
    need = {"year", "block", "bmr"}
    if reader.fieldnames is None or not need <= set(reader.fieldnames):
        raise ValueError(f"observation CSV needs columns {sorted(need)}")
    out = []
    for row in reader:
        block = validate_geoid(row["block"].strip(), UnitLevel.BLOCK)
        out.append(BMRObservation(int(row["year"]), block, float(row["bmr"])))
    return out


def bmr_observations(counts: dict, populations: dict) -> list[BMRObservation]:
    """Block BMRs from ``{(block, year): deaths}`` and ``{year: {block: population}}``.

    Blocks with zero population are left out; populated blocks without deaths get 0.
    """
    out = []
    for year in sorted(populations):
        pops = populations[year]
        for block in sorted(pops):
            p = pops[block]
            if p > 0:
                out.append(BMRObservation(year, block, counts.get((block, year), 0) / p))
    return out
