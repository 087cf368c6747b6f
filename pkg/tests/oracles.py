"""Independent scalar re-implementations used as test oracles.

Nothing here imports the code under test's loss or metric functions; the
formulas are written out element by element in plain Python.
"""

import math

import numpy as np
import torch


def d_pos_yaw(a, b):
    return sum((float(x) - float(y)) ** 2 for x, y in zip(a, b))


def oracle_losses(pred, label):
    """Per-sample scalar losses; ``pred``/``label`` hold numpy arrays per field."""
    n = len(label["nav_dist"])
    rows = []
    for i in range(n):
        way = sum(d_pos_yaw(pred["waypoints"][i][k], label["waypoints"][i][k]) for k in range(len(label["waypoints"][i])))
        rel = d_pos_yaw(pred["rel_goal"][i], label["rel_goal"][i])
        dist = (float(pred["nav_dist"][i]) - float(label["nav_dist"][i])) ** 2
        glob = sum(
            d_pos_yaw(pred["global_path"][i][k], label["global_path"][i][k]) for k in range(len(label["global_path"][i]))
        )
        rows.append({"L_way": way, "L_rel": rel, "L_dist": dist, "L_glob": glob})
    return {k: math.fsum(r[k] for r in rows) / n for k in rows[0]}


def oracle_sr_spl(results):
    """``(SR, SPL)`` from (success, shortest, taken) triples."""
    n = len(results)
    sr = sum(1 for s, _, _ in results if s) / n
    spl = 0.0
    for s, d, p in results:
        if s:
            spl += 1.0 if p <= 0 else d / max(p, d)
    return sr, spl / n


def central_difference_check(model, loss_of, n_params=100, h=1e-5, seed=0):
    """Compare autograd with central differences on sampled scalar parameters.

    ``loss_of(model)`` must return a float64 scalar tensor. Returns
    ``(rel, abs_diff, noise)``: relative errors ``|fd-an| / max(|fd|, |an|)``,
    absolute differences, and the round-off resolution ``4 eps |L| / h`` of
    the finite difference. A parameter whose gradient is exactly zero (for
    example an attention key bias) can only be judged against ``noise``.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss = loss_of(model)
    loss.backward()
    noise = 4 * np.finfo(np.float64).eps * abs(loss.item()) / h
    grads = [p.grad.detach().clone() for p in params]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    chosen = rng.choice(sizes.sum(), size=n_params, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rel, diff = [], []
    with torch.no_grad():
        for flat in chosen:
            pi = int(np.searchsorted(offsets, flat, side="right") - 1)
            j = int(flat - offsets[pi])
            view = params[pi].view(-1)
            orig = view[j].item()
            view[j] = orig + h
            up = loss_of(model).item()
            view[j] = orig - h
            down = loss_of(model).item()
            view[j] = orig
            fd = (up - down) / (2 * h)
            an = grads[pi].view(-1)[j].item()
            diff.append(abs(fd - an))
            rel.append(abs(fd - an) / max(abs(fd), abs(an), 1e-300))
    return np.array(rel), np.array(diff), noise


def gradient_check_passes(rel, diff, noise, tol=1e-4):
    """Each parameter passes on relative error, or on an absolute difference below round-off."""
    return bool(np.all((rel <= tol) | (diff <= noise)))
