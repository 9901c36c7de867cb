"""Descriptor learning at desk scale.

The objective scores each pixel's projected cost row with a softmax
likelihood of the ground-truth displacement; gradients flow through the
inner argmin tables of the projection (one matched pair per row entry)
back into the two-layer extractor. Three schemes are supported: FF
(full cost throughout), FQ (quantized inner argmin, exact outer
gradient) and QQ_STE (quantized throughout, sign treated as identity
when differentiating).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .costvol import CostProjectionPair, SearchWindow, min_project
from .descriptors import M, ThetaParams, quantize, tiny_extractor_forward, unpack_signs

SCHEMES = ("FF", "FQ", "QQ_STE")


@dataclass
class TargetFlow:
    """Integer displacement targets with a validity mask.

    Ground-truth components are rounded to the nearest integer label;
    pixels whose rounded target leaves the search window are masked out.
    """

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray
    window: SearchWindow

    @staticmethod
    def from_flow(gt_u: np.ndarray, gt_v: np.ndarray, window: SearchWindow) -> "TargetFlow":
        gt_u = np.asarray(gt_u, dtype=np.float64)
        gt_v = np.asarray(gt_v, dtype=np.float64)
        finite = np.isfinite(gt_u) & np.isfinite(gt_v)
        u = np.rint(np.where(finite, gt_u, 0.0)).astype(np.int64)
        v = np.rint(np.where(finite, gt_v, 0.0)).astype(np.int64)
        r = window.radius
        valid = finite & (u >= -r) & (u <= r - 1) & (v >= -r) & (v <= r - 1)
        return TargetFlow(u=u, v=v, valid=valid, window=window)

    def labels(self) -> tuple[np.ndarray, np.ndarray]:
        return self.window.disp_to_labels(self.u), self.window.disp_to_labels(self.v)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    steps: int = 50
    scheme: str = "FF"
    seed: int = 0
    d: int = 4
    k: int = 4

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}, expected one of {SCHEMES}")


def _row_nll_and_grad(costs: np.ndarray, labels: np.ndarray, valid: np.ndarray):
    # softmax over -costs per pixel row, stabilized by max subtraction
    z = -np.asarray(costs, dtype=np.float64)
    zmax = z.max(axis=2, keepdims=True)
    ez = np.exp(z - zmax)
    zsum = ez.sum(axis=2)
    logp = (z - zmax) - np.log(zsum)[:, :, None]
    probs = ez / zsum[:, :, None]
    h, w, _ = z.shape
    ys, xs = np.mgrid[0:h, 0:w]
    nll = -logp[ys, xs, labels]
    onehot = np.zeros_like(probs)
    onehot[ys, xs, labels] = 1.0
    # dL/dcost: raising the target's cost raises the loss
    grad = (onehot - probs) * valid[:, :, None]
    return float(nll[valid].sum()), grad


def softmax_nll(pair: CostProjectionPair, target: TargetFlow) -> float:
    """Negative log likelihood of the targets under p(.) ~ exp(-cost)."""
    if not target.valid.any():
        raise ValueError("no valid target pixels inside the search window")
    lu, lv = target.labels()
    loss_u, _ = _row_nll_and_grad(pair.c_u, lu, target.valid)
    loss_v, _ = _row_nll_and_grad(pair.c_v, lv, target.valid)
    return loss_u + loss_v


def loss_grad_costs(pair: CostProjectionPair, target: TargetFlow) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the likelihood loss w.r.t. the projected cost entries.

    Rows sum to zero; invalid pixels contribute zero rows. Matches central
    finite differences of softmax_nll in the cost entries.
    """
    if not target.valid.any():
        raise ValueError("no valid target pixels inside the search window")
    lu, lv = target.labels()
    _, g_u = _row_nll_and_grad(pair.c_u, lu, target.valid)
    _, g_v = _row_nll_and_grad(pair.c_v, lv, target.valid)
    return g_u, g_v


def backprop_projection(
    g_u: np.ndarray,
    g_v: np.ndarray,
    pair: CostProjectionPair,
    scheme: str,
) -> tuple[np.ndarray, np.ndarray]:
    """Route projected-cost gradients to per-pair dot products.

    The projection's value at (i, u) depends on the single 4D entry
    (u, argmin_v[i, u]), so each entry of g_u flows there unchanged; with
    cost = -<.,.> the dot-product gradient is the negated cost gradient.
    Returns (gdot_u, gdot_v) aligned with the argmin tables of ``pair``.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    want_inner = "F" if scheme == "FF" else "Q"
    if pair.inner_mode != want_inner:
        raise ValueError(
            f"scheme {scheme} needs a projection with inner mode {want_inner}, got {pair.inner_mode}"
        )
    return -np.asarray(g_u, dtype=np.float64), -np.asarray(g_v, dtype=np.float64)


def _scatter_pair_grads(gdot, arg_table, desc1, desc2, window, axis: str, dphi1, dphi2):
    # axis "u": entries (i, ul) matched to (ul, argmin_v); axis "v" symmetric
    h, w, d = gdot.shape
    r = window.radius
    ys, xs = np.mgrid[0:h, 0:w]
    labels = np.arange(d)
    if axis == "u":
        u_disp = labels[None, None, :] - r
        v_disp = arg_table.astype(np.int64) - r
    else:
        v_disp = labels[None, None, :] - r
        u_disp = arg_table.astype(np.int64) - r
    ty = ys[:, :, None] + v_disp
    tx = xs[:, :, None] + u_disp
    valid = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
    g = np.where(valid, gdot, 0.0)
    tyc = np.clip(ty, 0, h - 1)
    txc = np.clip(tx, 0, w - 1)
    # d(dot)/d phi1[i] = phi2[j], d(dot)/d phi2[j] = phi1[i]
    dphi1 += np.einsum("yxd,yxdk->yxk", g, desc2[tyc, txc])
    np.add.at(dphi2, (tyc, txc), g[:, :, :, None] * desc1[:, :, None, :])


def descriptor_field_grads(
    gdot_u: np.ndarray,
    gdot_v: np.ndarray,
    pair: CostProjectionPair,
    phi1: np.ndarray,
    phi2: np.ndarray,
    scheme: str,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. both float descriptor fields.

    FF/FQ differentiate the full-cost dot product at the selected pairs;
    QQ_STE differentiates the quantized dot while treating sign as the
    identity, so each side receives the counterpart's sign pattern.
    """
    if scheme == "QQ_STE":
        c1 = unpack_signs(quantize(phi1))
        c2 = unpack_signs(quantize(phi2))
    else:
        c1, c2 = phi1, phi2
    dphi1 = np.zeros_like(phi1)
    dphi2 = np.zeros_like(phi2)
    _scatter_pair_grads(gdot_u, pair.argmin_v, c1, c2, pair.window, "u", dphi1, dphi2)
    _scatter_pair_grads(gdot_v, pair.argmin_u, c1, c2, pair.window, "v", dphi1, dphi2)
    return dphi1, dphi2


def _extractor_backward(image: np.ndarray, theta: ThetaParams, hid, out, dphi):
    dpre2 = dphi * (1.0 - out * out)
    dw2 = np.einsum("yxk,yxm->km", hid, dpre2)
    db2 = dpre2.sum(axis=(0, 1))
    dhid = dpre2 @ theta.w2.T
    dpre1 = dhid * (1.0 - hid * hid)
    db1 = dpre1.sum(axis=(0, 1))
    img = np.asarray(image, dtype=np.float64)
    h, w, _ = img.shape
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)))
    dw1 = np.zeros_like(theta.w1)
    for dy in range(3):
        for dx in range(3):
            patch = padded[dy : dy + h, dx : dx + w, :]
            dw1[dy, dx] = np.einsum("yxc,yxk->ck", patch, dpre1)
    return dw1, db1, dw2, db2


def _project_for_scheme(phi1, phi2, window, scheme):
    if scheme == "FF":
        return min_project(phi1, phi2, window, "FF")
    variant = "FQ" if scheme == "FQ" else "QQ"
    return min_project(phi1, phi2, window, variant, desc1_q=quantize(phi1), desc2_q=quantize(phi2))


def grad_theta(
    image1: np.ndarray,
    image2: np.ndarray,
    target: TargetFlow,
    theta: ThetaParams,
    scheme: str,
    window: SearchWindow,
) -> tuple[float, ThetaParams]:
    """Loss and its exact gradient w.r.t. the extractor parameters."""
    phi1, hid1, _, _ = tiny_extractor_forward(image1, theta, with_hidden=True)
    phi2, hid2, _, _ = tiny_extractor_forward(image2, theta, with_hidden=True)
    pair = _project_for_scheme(phi1, phi2, window, scheme)
    loss = softmax_nll(pair, target)
    g_u, g_v = loss_grad_costs(pair, target)
    gdot_u, gdot_v = backprop_projection(g_u, g_v, pair, scheme)
    dphi1, dphi2 = descriptor_field_grads(gdot_u, gdot_v, pair, phi1, phi2, scheme)
    for name, arr in (("dphi1", dphi1), ("dphi2", dphi2)):
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite gradient at stage {name}")
    grads = [
        _extractor_backward(image1, theta, hid1, phi1, dphi1),
        _extractor_backward(image2, theta, hid2, phi2, dphi2),
    ]
    total = ThetaParams(
        w1=grads[0][0] + grads[1][0],
        b1=grads[0][1] + grads[1][1],
        w2=grads[0][2] + grads[1][2],
        b2=grads[0][3] + grads[1][3],
    )
    if not np.all(np.isfinite(total.flat())):
        raise FloatingPointError("non-finite gradient at stage extractor_backward")
    return loss, total


def train(
    pairs: list[tuple[np.ndarray, np.ndarray, TargetFlow]],
    cfg: TrainConfig,
    theta0: ThetaParams | None = None,
) -> tuple[ThetaParams, list[float]]:
    """Plain gradient descent on the summed loss; deterministic per seed."""
    if not pairs:
        raise ValueError("empty training set")
    window = SearchWindow(cfg.d)
    theta = theta0.copy() if theta0 is not None else ThetaParams.random(cfg.k, cfg.seed)
    losses: list[float] = []
    for step in range(cfg.steps):
        total_loss = 0.0
        total_grad = ThetaParams.zeros(theta.k)
        for image1, image2, target in pairs:
            loss, grad = grad_theta(image1, image2, target, theta, cfg.scheme, window)
            total_loss += loss
            total_grad.w1 += grad.w1
            total_grad.b1 += grad.b1
            total_grad.w2 += grad.w2
            total_grad.b2 += grad.b2
        if not np.isfinite(total_loss):
            raise FloatingPointError(f"training diverged at step {step}; trace: {losses}")
        losses.append(total_loss)
        lr = cfg.learning_rate
        theta.w1 -= lr * total_grad.w1
        theta.b1 -= lr * total_grad.b1
        theta.w2 -= lr * total_grad.w2
        theta.b2 -= lr * total_grad.b2
    return theta, losses
