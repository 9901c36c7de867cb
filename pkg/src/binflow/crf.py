"""Joint flow model: decomposed dual with four multiplier fields.

The pairwise energy over flow components u, v is split into horizontal
chains, vertical chains (per plane) and a cross-plane subproblem holding
the 4D matching cost, which is evaluated on the fly. Multipliers lam1/lam3
index u-labels, lam2/lam4 index v-labels; the dual objective ``psi`` is a
lower bound on every primal labeling (weak duality).

The in-plane solver alternates between the two chain subproblems of one
plane: each step extracts a tight modular minorant from one subproblem
and hands it to the other, which cannot decrease the plane bound. The
slack returned to the caller is the final extraction from both
subproblems; subtracting it from the cross-plane multiplier leaves the
plane with a non-negative residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .costvol import SearchWindow

COST_OUTSIDE = kernels.COST_OUTSIDE


@dataclass(frozen=True)
class RobustPenalty:
    """Truncated linear penalty min(tau1*|t|, tau2)."""

    tau1: float = 0.25
    tau2: float = 25.0

    def __post_init__(self):
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise ValueError(f"penalty parameters must be positive, got {self.tau1}, {self.tau2}")


def rho(t: float, p: RobustPenalty) -> float:
    return min(p.tau1 * abs(t), p.tau2)


@dataclass(frozen=True)
class EdgeWeights:
    """Contrast weights per 4-neighbor edge of the first image.

    w_h[y, x] weights the edge (y, x)-(y, x+1); w_v[y, x] the edge
    (y, x)-(y+1, x). Values lie in (0, 1].
    """

    w_h: np.ndarray
    w_v: np.ndarray


def contrast_weights(image: np.ndarray, alpha: float) -> EdgeWeights:
    """w_ij = exp(-(alpha/3) * sum_c |I_i,c - I_j,c|) over 4-neighbor edges."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {img.shape}")
    dh = np.abs(img[:, 1:, :] - img[:, :-1, :]).sum(axis=2)
    dv = np.abs(img[1:, :, :] - img[:-1, :, :]).sum(axis=2)
    return EdgeWeights(w_h=np.exp(-(alpha / 3.0) * dh), w_v=np.exp(-(alpha / 3.0) * dv))


def uniform_weights(height: int, width: int, value: float = 1.0) -> EdgeWeights:
    return EdgeWeights(
        w_h=np.full((height, max(width - 1, 0)), value),
        w_v=np.full((max(height - 1, 0), width), value),
    )


@dataclass
class DualState:
    """The four multiplier fields, each (H, W, D)."""

    lam1: np.ndarray
    lam2: np.ndarray
    lam3: np.ndarray
    lam4: np.ndarray

    @staticmethod
    def zeros(height: int, width: int, d: int) -> "DualState":
        shape = (height, width, d)
        return DualState(*(np.zeros(shape) for _ in range(4)))


@dataclass(frozen=True)
class TraceRecord:
    step: str
    psi: float
    energy: float | None = None


@dataclass
class BoundTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def add(self, step: str, psi: float, energy: float | None = None) -> None:
        self.records.append(TraceRecord(step, psi, energy))

    def psi_values(self) -> np.ndarray:
        return np.array([r.psi for r in self.records])

    def csv_lines(self) -> list[str]:
        lines = ["step_label,psi,energy"]
        for r in self.records:
            e = "" if r.energy is None else f"{r.energy!r}"
            lines.append(f"{r.step},{r.psi!r},{e}")
        return lines


@dataclass(frozen=True)
class CrfParams:
    """Inference configuration; defaults follow the fixed parameter set."""

    d: int = 128
    alpha: float = 8.5
    tau1: float = 0.25
    tau2: float = 25.0
    it_inner: int = 8
    it_outer: int = 5
    mode: str = "Q"

    def __post_init__(self):
        if self.d <= 0 or self.d % 2:
            raise ValueError(f"d must be even and positive, got {self.d}")
        if self.mode not in ("F", "Q"):
            raise ValueError(f"mode must be 'F' or 'Q', got {self.mode!r}")
        if self.it_inner < 1:
            raise ValueError(f"it_inner must be >= 1, got {self.it_inner}")
        if self.it_outer < 0:
            raise ValueError(f"it_outer must be >= 0, got {self.it_outer}")

    @property
    def penalty(self) -> RobustPenalty:
        return RobustPenalty(self.tau1, self.tau2)

    @property
    def window(self) -> SearchWindow:
        return SearchWindow(self.d)


def chain_dt_message(h: np.ndarray, w: float, p: RobustPenalty) -> np.ndarray:
    """out[t] = min_s (h[s] + w * rho(t - s)) in O(D)."""
    h = np.ascontiguousarray(h, dtype=np.float64)
    out = np.empty_like(h)
    kernels.dt_message_into(h, float(w), p.tau1, p.tau2, out)
    return out


def _rows_bound(unary: np.ndarray, weights: EdgeWeights, p: RobustPenalty) -> float:
    out = np.empty(unary.shape[0])
    kernels.chain_bounds_rows(np.ascontiguousarray(unary), np.ascontiguousarray(weights.w_h), p.tau1, p.tau2, out)
    return float(out.sum())


def _cols_bound(unary: np.ndarray, weights: EdgeWeights, p: RobustPenalty) -> float:
    out = np.empty(unary.shape[1])
    kernels.chain_bounds_cols(np.ascontiguousarray(unary), np.ascontiguousarray(weights.w_v), p.tau1, p.tau2, out)
    return float(out.sum())


def plane_bound(lam_in: np.ndarray, lam_cross: np.ndarray, weights: EdgeWeights, p: RobustPenalty) -> float:
    """Bound of one plane: row chains with unary lam_in + lam_cross plus
    column chains with unary -lam_in."""
    return _rows_bound(lam_in + lam_cross, weights, p) + _cols_bound(-lam_in, weights, p)


def dmm_inplane(
    lam_in: np.ndarray,
    lam_cross: np.ndarray,
    weights: EdgeWeights,
    p: RobustPenalty,
    it_inner: int,
) -> tuple[np.ndarray, np.ndarray]:
    """In-plane dual sweeps; returns (updated lam_in, slack s).

    The slack is a modular minorant of lam_cross + f_h + f_v whose
    decoupled bound sum_i min_t s_i(t) equals the plane bound reached by
    the sweeps. The caller subtracts it: lam_cross := lam_cross - s.
    """
    if it_inner < 1:
        raise ValueError(f"it_inner must be >= 1, got {it_inner}")
    a = np.ascontiguousarray(lam_cross + lam_in)
    b = np.ascontiguousarray(-lam_in)
    w_h = np.ascontiguousarray(weights.w_h, dtype=np.float64)
    w_v = np.ascontiguousarray(weights.w_v, dtype=np.float64)
    q = np.empty_like(a)
    r = np.empty_like(b)
    for sweep in range(it_inner):
        rev = bool(sweep % 2)
        kernels.extract_rows(a, w_h, p.tau1, p.tau2, rev, q)
        a -= q
        b += q
        kernels.extract_cols(b, w_v, p.tau1, p.tau2, rev, r)
        b -= r
        a += r
    kernels.extract_rows(a, w_h, p.tau1, p.tau2, False, q)
    a -= q
    kernels.extract_cols(b, w_v, p.tau1, p.tau2, False, r)
    b -= r
    s = q + r
    lam_in_new = -b
    return lam_in_new, s


def _cost_fields(desc1, desc2, mode):
    if mode == "Q":
        if desc1.dtype != np.uint64:
            raise ValueError("Q mode needs packed uint64 descriptor fields")
    else:
        if desc1.ndim != 3:
            raise ValueError("F mode needs (H, W, 64) float descriptor fields")
        desc1 = np.ascontiguousarray(desc1, dtype=np.float64)
        desc2 = np.ascontiguousarray(desc2, dtype=np.float64)
    return desc1, desc2


def pass_v_to_u(
    lam3: np.ndarray,
    lam4: np.ndarray,
    desc1,
    desc2,
    window: SearchWindow,
    mode: str,
) -> np.ndarray:
    """lam3[i](u) += min_v [c_i(u, v) - lam4[i](v)], cost evaluated on the fly."""
    desc1, desc2 = _cost_fields(desc1, desc2, mode)
    out = np.ascontiguousarray(lam3, dtype=np.float64).copy()
    lam4 = np.ascontiguousarray(lam4, dtype=np.float64)
    if mode == "Q":
        kernels.pass_vu_q(desc1, desc2, out, lam4, window.d)
    else:
        kernels.pass_vu_f(desc1, desc2, out, lam4, window.d)
    return out


def pass_u_to_v(
    lam3: np.ndarray,
    lam4: np.ndarray,
    desc1,
    desc2,
    window: SearchWindow,
    mode: str,
) -> np.ndarray:
    """lam4[i](v) += min_u [c_i(u, v) - lam3[i](u)], cost evaluated on the fly."""
    desc1, desc2 = _cost_fields(desc1, desc2, mode)
    out = np.ascontiguousarray(lam4, dtype=np.float64).copy()
    lam3 = np.ascontiguousarray(lam3, dtype=np.float64)
    if mode == "Q":
        kernels.pass_uv_q(desc1, desc2, lam3, out, window.d)
    else:
        kernels.pass_uv_f(desc1, desc2, lam3, out, window.d)
    return out


def lower_bound(
    state: DualState,
    desc1,
    desc2,
    weights: EdgeWeights,
    p: RobustPenalty,
    mode: str,
    window: SearchWindow,
) -> float:
    """Dual objective: both plane bounds plus the cross-plane term."""
    desc1, desc2 = _cost_fields(desc1, desc2, mode)
    psi1 = plane_bound(state.lam1, state.lam3, weights, p)
    psi2 = plane_bound(state.lam2, state.lam4, weights, p)
    h, w = state.lam3.shape[:2]
    cross = np.empty((h, w))
    lam3 = np.ascontiguousarray(state.lam3)
    lam4 = np.ascontiguousarray(state.lam4)
    if mode == "Q":
        kernels.crossterm_q(desc1, desc2, lam3, lam4, window.d, cross)
    else:
        kernels.crossterm_f(desc1, desc2, lam3, lam4, window.d, cross)
    return psi1 + psi2 + float(cross.sum())


def _flow_costs(desc1, desc2, u_disp: np.ndarray, v_disp: np.ndarray, mode: str) -> np.ndarray:
    if mode == "Q":
        h, w = desc1.shape
    else:
        h, w = desc1.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    ty = ys + v_disp
    tx = xs + u_disp
    valid = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
    tyc = np.clip(ty, 0, h - 1)
    txc = np.clip(tx, 0, w - 1)
    if mode == "Q":
        costs = 2.0 * np.bitwise_count(desc1 ^ desc2[tyc, txc]).astype(np.float64) - 64.0
    else:
        costs = -np.einsum("yxk,yxk->yx", desc1, desc2[tyc, txc])
    return np.where(valid, costs, COST_OUTSIDE)


def primal_energy(
    u_disp: np.ndarray,
    v_disp: np.ndarray,
    desc1,
    desc2,
    weights: EdgeWeights,
    p: RobustPenalty,
    mode: str,
    window: SearchWindow,
) -> float:
    """Data term plus weighted pairwise penalties of an integer labeling."""
    u_disp = np.asarray(u_disp, dtype=np.int64)
    v_disp = np.asarray(v_disp, dtype=np.int64)
    r = window.radius
    for name, arr in (("u", u_disp), ("v", v_disp)):
        if arr.min() < -r or arr.max() > r - 1:
            raise ValueError(f"{name} label out of range [-{r}, {r - 1}]")
    desc1, desc2 = _cost_fields(desc1, desc2, mode)
    data = _flow_costs(desc1, desc2, u_disp, v_disp, mode).sum()
    pair = 0.0
    for comp in (u_disp, v_disp):
        dh = np.abs(comp[:, 1:] - comp[:, :-1]).astype(np.float64)
        dv = np.abs(comp[1:, :] - comp[:-1, :]).astype(np.float64)
        pair += (weights.w_h * np.minimum(p.tau1 * dh, p.tau2)).sum()
        pair += (weights.w_v * np.minimum(p.tau1 * dv, p.tau2)).sum()
    return float(data + pair)


def decode_primal(
    state: DualState,
    desc1,
    desc2,
    window: SearchWindow,
    mode: str,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel argmin of c(u, v) - lam3(u) - lam4(v); ties to the
    smallest u, then smallest v. Returns float32 displacement planes."""
    desc1, desc2 = _cost_fields(desc1, desc2, mode)
    h, w = state.lam3.shape[:2]
    out_u = np.empty((h, w), dtype=np.int16)
    out_v = np.empty((h, w), dtype=np.int16)
    lam3 = np.ascontiguousarray(state.lam3)
    lam4 = np.ascontiguousarray(state.lam4)
    if mode == "Q":
        kernels.decode_q(desc1, desc2, lam3, lam4, window.d, out_u, out_v)
    else:
        kernels.decode_f(desc1, desc2, lam3, lam4, window.d, out_u, out_v)
    u = window.labels_to_disp(out_u).astype(np.float32)
    v = window.labels_to_disp(out_v).astype(np.float32)
    return u, v


def optimize(
    desc1,
    desc2,
    image: np.ndarray,
    params: CrfParams,
    weights: EdgeWeights | None = None,
    record_energy: bool = True,
) -> tuple[tuple[np.ndarray, np.ndarray], BoundTrace, DualState]:
    """Dual optimization loop from a zero multiplier state.

    Per outer iteration: pass slacks v->u, in-plane sweeps on the u-plane,
    pass u->v, in-plane sweeps on the v-plane; the bound is recorded after
    every step. Returns the decoded flow, the trace and the final state.
    """
    if weights is None:
        weights = contrast_weights(image, params.alpha)
    mode = params.mode
    window = params.window
    p = params.penalty
    desc1, desc2 = _cost_fields(desc1, desc2, mode)
    if mode == "Q":
        h, w = desc1.shape
    else:
        h, w = desc1.shape[:2]
    state = DualState.zeros(h, w, params.d)
    trace = BoundTrace()

    def psi() -> float:
        return lower_bound(state, desc1, desc2, weights, p, mode, window)

    def energy_now() -> float | None:
        if not record_energy:
            return None
        du, dv = decode_primal(state, desc1, desc2, window, mode)
        return primal_energy(
            du.astype(np.int64), dv.astype(np.int64), desc1, desc2, weights, p, mode, window
        )

    current = psi()
    trace.add("init", current, energy_now())

    def guarded(step: str, apply_step) -> None:
        # ascent guard: a step that would lower the bound is rolled back;
        # this triggers only once the dual trajectory has settled into a
        # cycle, improving steps are never rejected
        nonlocal current
        saved = (state.lam1, state.lam2, state.lam3, state.lam4)
        apply_step()
        candidate = psi()
        if candidate >= current:
            current = candidate
        else:
            state.lam1, state.lam2, state.lam3, state.lam4 = saved
        trace.add(step, current, energy_now())

    def step_pass_vu() -> None:
        # pass slacks into the u-plane, then let the plane absorb them
        # into its chain subproblems with one sweep
        state.lam3 = pass_v_to_u(state.lam3, state.lam4, desc1, desc2, window, mode)
        state.lam1, s = dmm_inplane(state.lam1, state.lam3, weights, p, 1)
        state.lam3 = state.lam3 - s

    def step_plane_u() -> None:
        state.lam1, s = dmm_inplane(state.lam1, state.lam3, weights, p, params.it_inner)
        state.lam3 = state.lam3 - s

    def step_pass_uv() -> None:
        state.lam4 = pass_u_to_v(state.lam3, state.lam4, desc1, desc2, window, mode)
        state.lam2, s = dmm_inplane(state.lam2, state.lam4, weights, p, 1)
        state.lam4 = state.lam4 - s

    def step_plane_v() -> None:
        state.lam2, s = dmm_inplane(state.lam2, state.lam4, weights, p, params.it_inner)
        state.lam4 = state.lam4 - s

    for _ in range(params.it_outer):
        guarded("v_to_u", step_pass_vu)
        guarded("u_plane", step_plane_u)
        guarded("u_to_v", step_pass_uv)
        guarded("v_plane", step_plane_v)
    flow = decode_primal(state, desc1, desc2, window, mode)
    return flow, trace, state
