"""Finite-difference verification of every parameterized layer and loss."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import (batch_contrastive_loss, cos_loss, downstream_loss, pair_contrastive_loss,
                     pretrain_loss, weight_loss)
from .network import FINETUNE_GROUP, HyperParams, WeightedNormalNet

LAYER_TOLERANCE = 1e-4
COMPOSITE_TOLERANCE = 1e-3

# small enough for central differences over every entry to finish in seconds
TINY = dict(k_graph=3, patch_size=8, feature_dim=6, proj_dim=4, edge_widths=(4, 5),
            weight_widths=(5, 3), normal_widths=(4, 5), head_hidden=5, regressor_widths=(5, 4))


def _unit_rows(rng, b):
    v = rng.normal(size=(b, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _params(net, prefix):
    return {n: net.params[n] for n in net.params.names(prefix)}


def gradient_suite(seed: int = 0, h: float = 1e-5) -> list[tuple[str, float, ad.GradCheckReport]]:
    """Run every check; returns ``(name, tolerance, report)`` rows."""
    rng = np.random.default_rng(seed)
    net = WeightedNormalNet(HyperParams(**TINY), seed=seed)
    pts = rng.normal(size=(2, 8, 3))
    pts /= np.max(np.linalg.norm(pts, axis=-1, keepdims=True), axis=1, keepdims=True)
    ctr = pts[:, 0].copy()
    normals = _unit_rows(rng, 2)
    targets = rng.uniform(0.0, 1.0, size=(2, 8))
    probe = rng.normal(size=(2, 3))
    rows = []

    def run(name, builder, params, tol):
        rows.append((name, tol, ad.grad_check(builder, params, tolerance=tol, h=h)))

    def encoder():
        return ad.sum(ad.square(net.encode(pts, ctr).global_feature))

    def weights():
        return ad.sum(ad.square(net.weighted_features(pts, ctr)[1]))

    def point_head():
        return ad.sum(ad.square(net.project_patch(net.weighted_features(pts, ctr)[0].global_feature)))

    def normal_branch():
        return ad.sum(ad.square(net.project_normal(net.encode_normal(normals))))

    def regressor():
        raw = net.regress_normal(net.weighted_features(pts, ctr)[0].global_feature)
        return ad.sum(ad.mul(raw, Tensor(probe)))

    run("edgeconv+point encoder", encoder, _params(net, "point_encoder."), LAYER_TOLERANCE)
    run("weight regressor", weights, _params(net, "weight_regressor."), LAYER_TOLERANCE)
    run("point projection head", point_head, _params(net, "point_head."), LAYER_TOLERANCE)
    run("normal encoder", normal_branch, _params(net, "normal_encoder."), LAYER_TOLERANCE)
    run("normal projection head", normal_branch, _params(net, "normal_head."), LAYER_TOLERANCE)
    run("normal regressor", regressor, _params(net, "normal_regressor."), LAYER_TOLERANCE)

    w = Tensor(rng.uniform(0.0, 1.0, size=(2, 8)), requires_grad=True)
    zp = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    zn = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    pred = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    run("L_weight", lambda: weight_loss(w, targets), {"w": w}, LAYER_TOLERANCE)
    run("L_cont pair", lambda: pair_contrastive_loss(zp, zn, 0.1, 0, 3), {"zp": zp, "zn": zn}, LAYER_TOLERANCE)
    run("L_cont batch", lambda: batch_contrastive_loss(zp, zn, 0.1), {"zp": zp, "zn": zn}, LAYER_TOLERANCE)
    run("L_cos", lambda: cos_loss(pred, normals), {"pred": pred}, LAYER_TOLERANCE)

    def l_pre():
        feats, wt = net.weighted_features(pts, ctr)
        z_patch = net.project_patch(feats.global_feature)
        z_normal = net.project_normal(net.encode_normal(normals))
        return pretrain_loss(batch_contrastive_loss(z_patch, z_normal, 0.1), weight_loss(wt, targets), 1.0)

    def l_down():
        feats, wt = net.weighted_features(pts, ctr)
        raw = net.regress_normal(feats.global_feature)
        return downstream_loss(cos_loss(raw, normals), weight_loss(wt, targets), 1.0)

    pre_names = ("point_encoder.", "weight_regressor.", "point_head.", "normal_encoder.", "normal_head.")
    run("L_pre composite", l_pre, _params(net, pre_names), COMPOSITE_TOLERANCE)
    run("L_down composite", l_down, _params(net, FINETUNE_GROUP), COMPOSITE_TOLERANCE)
    return rows


def format_suite(rows) -> str:
    lines = []
    for name, tol, report in rows:
        status = "ok" if report.passed else "FAIL"
        tensor = max(report.max_rel_error, key=report.max_rel_error.get)
        lines.append(f"{status:4s} {name:24s} max rel err {report.worst:.2e} (tol {tol:g}, worst {tensor})")
    return "\n".join(lines)
