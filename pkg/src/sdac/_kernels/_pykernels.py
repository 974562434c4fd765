"""Pure-Python/numpy kernels. Reference semantics for the compiled versions."""
import numpy as np

# entries lighter than this (after normalisation) are dropped before projection
WEIGHT_FLOOR = 1e-12
# slack when comparing accumulated weight against a quantile level
LEVEL_TOL = 1e-12


def project_weighted(positions, weights, m_out):
    """Project a weighted atom set onto ``m_out`` equal-weight atoms.

    Atom ``i`` is the smallest position whose accumulated weight reaches the
    midpoint level ``(i + 0.5) / m_out``.
    """
    positions = np.asarray(positions, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if positions.size == 0 or not total > 0.0:
        raise ValueError("cannot project an empty atom set")
    w = weights / total
    keep = w >= WEIGHT_FLOOR
    pos = positions[keep]
    w = w[keep]
    order = np.argsort(pos, kind="stable")
    pos = pos[order]
    cdf = np.cumsum(w[order])
    levels = (np.arange(m_out) + 0.5) / m_out
    idx = np.searchsorted(cdf, levels - LEVEL_TOL, side="left")
    np.minimum(idx, pos.size - 1, out=idx)
    return pos[idx]


def td_lambda_targets(rewards, dones, ratios, boot, gamma, lam, m_proj):
    """Backward TD(lambda) target recursion over one trajectory.

    ``boot[t]`` holds the equal-weight bootstrap atoms at ``(s_{t+1}, a'_{t+1})``
    and ``ratios[t]`` the (capped) importance ratio at ``(s_t, a_t)``.
    Returns a ``(T, m_proj)`` array of projected targets.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    ratios = np.asarray(ratios, dtype=np.float64)
    boot = np.asarray(boot, dtype=np.float64)
    n_steps, n_boot = boot.shape
    out = np.empty((n_steps, m_proj))
    if n_steps == 0:
        return out
    last = n_steps - 1
    tot = rewards[last] + (1.0 - dones[last]) * gamma * boot[last]
    w_tot = lam
    for t in range(last, -1, -1):
        one = rewards[t] + (1.0 - dones[t]) * gamma * boot[t]
        w_one = 1.0 - lam
        if w_one + w_tot <= 0.0:
            # lam == 1 right after a terminal: the carried target equals the one-step one
            w_one = 1.0
            w_tot = 0.0
        pos = np.concatenate([one, tot])
        wts = np.concatenate(
            [np.full(n_boot, w_one / n_boot), np.full(tot.size, w_tot / tot.size)]
        )
        out[t] = project_weighted(pos, wts, m_proj)
        if t > 0:
            cont = 1.0 - dones[t - 1]
            tot = rewards[t - 1] + cont * gamma * out[t]
            w_tot = lam * ratios[t] * cont * (1.0 - lam + w_tot)
            if not np.isfinite(w_tot):
                raise FloatingPointError(f"trace weight overflowed at step {t}")
    return out


def quantile_loss_grad(pred, target, target_w):
    """Pinball loss and its subgradient, row by row.

    ``pred`` is ``(N, M)``; ``target``/``target_w`` are ``(N, J)`` with rows of
    weights summing to one. Returns per-row loss ``(N,)`` and ``d loss / d pred``
    ``(N, M)``. A target equal to the prediction counts as "not below".
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    target_w = np.asarray(target_w, dtype=np.float64)
    n_atoms = pred.shape[1]
    tau = (np.arange(n_atoms) + 0.5) / n_atoms
    u = target[:, None, :] - pred[:, :, None]
    below = u < 0.0
    rho = u * (tau[None, :, None] - below)
    loss = np.einsum("nmj,nj->n", rho, target_w)
    grad = np.einsum("nmj,nj->nm", below.astype(np.float64), target_w) - tau[None, :]
    return loss, grad
