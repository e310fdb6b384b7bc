"""Hot numeric kernels with a numba path and a numpy fallback.

Each public name is bound at import time to either the compiled loop version
(``*_nb``) or the vectorised numpy version (``*_np``); see :mod:`crowdslam._accel`.
Both versions are importable directly so that tests and the benchmark script
can compare them.
"""

import numpy as np

from crowdslam._accel import jit, select

# --------------------------------------------------------------------------
# social repulsion (pedestrian-pedestrian and pedestrian-robot)
# --------------------------------------------------------------------------


def social_forces_np(pos, robot_xy, strength, falloff, radius, robot_radius):
    n = pos.shape[0]
    out = np.zeros((n, 2))
    if n == 0:
        return out
    contact = 2.0 * radius
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2)
    idx = np.arange(n)
    coincident = dist < 1e-9
    safe = np.where(coincident, 1.0, dist)
    ux = np.where(coincident, np.where(idx[:, None] < idx[None, :], -1.0, 1.0), diff[..., 0] / safe)
    uy = np.where(coincident, 0.0, diff[..., 1] / safe)
    dist = np.where(coincident, contact, dist)
    mag = strength * np.exp((contact - dist) / falloff)
    mag[idx, idx] = 0.0
    out[:, 0] = np.sum(mag * ux, axis=1)
    out[:, 1] = np.sum(mag * uy, axis=1)

    rdiff = pos - robot_xy[None, :]
    rdist = np.sqrt(rdiff[:, 0] ** 2 + rdiff[:, 1] ** 2)
    rco = rdist < 1e-9
    rsafe = np.where(rco, 1.0, rdist)
    rux = np.where(rco, 1.0, rdiff[:, 0] / rsafe)
    ruy = np.where(rco, 0.0, rdiff[:, 1] / rsafe)
    rcontact = radius + robot_radius
    rmag = strength * np.exp((rcontact - np.where(rco, rcontact, rdist)) / falloff)
    out[:, 0] += rmag * rux
    out[:, 1] += rmag * ruy
    return out


@jit
def social_forces_nb(pos, robot_xy, strength, falloff, radius, robot_radius):
    n = pos.shape[0]
    out = np.zeros((n, 2))
    contact = 2.0 * radius
    rcontact = radius + robot_radius
    for i in range(n):
        fx = 0.0
        fy = 0.0
        for j in range(n):
            if j == i:
                continue
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            d = np.sqrt(dx * dx + dy * dy)
            if d < 1e-9:
                ux = -1.0 if i < j else 1.0
                uy = 0.0
                d = contact
            else:
                ux = dx / d
                uy = dy / d
            m = strength * np.exp((contact - d) / falloff)
            fx += m * ux
            fy += m * uy
        out[i, 0] = fx
        out[i, 1] = fy
        dx = pos[i, 0] - robot_xy[0]
        dy = pos[i, 1] - robot_xy[1]
        d = np.sqrt(dx * dx + dy * dy)
        if d < 1e-9:
            ux = 1.0
            uy = 0.0
            d = rcontact
        else:
            ux = dx / d
            uy = dy / d
        m = strength * np.exp((rcontact - d) / falloff)
        out[i, 0] += m * ux
        out[i, 1] += m * uy
    return out


# --------------------------------------------------------------------------
# sampling MPC: cost of every candidate control sequence
# --------------------------------------------------------------------------


def mpc_rollout_costs_np(pose, seqs, dt, ped_pos, ped_vel, goal, contact, margin, weights, arena):
    """Return ``(cost, min_clearance)`` per candidate sequence.

    ``weights`` is ``(goal, collision, effort, arena, heading)``; ``arena`` is
    ``(xmin, xmax, ymin, ymax)``.  The heading term ``dist * (1 - cos(err))``
    rewards facing the goal and vanishes on arrival.
    """
    n_seq, horizon = seqs.shape[0], seqs.shape[1]
    x = np.full(n_seq, pose[0])
    y = np.full(n_seq, pose[1])
    th = np.full(n_seq, pose[2])
    coll = np.zeros(n_seq)
    effort = np.zeros(n_seq)
    outside = np.zeros(n_seq)
    min_clear = np.full(n_seq, np.inf)
    n_ped = ped_pos.shape[0]
    for t in range(horizon):
        v = seqs[:, t, 0]
        w = seqs[:, t, 1]
        x = x + v * np.cos(th) * dt
        y = y + v * np.sin(th) * dt
        th = th + w * dt
        if n_ped:
            px = ped_pos[:, 0] + ped_vel[:, 0] * dt * (t + 1)
            py = ped_pos[:, 1] + ped_vel[:, 1] * dt * (t + 1)
            dx = x[:, None] - px[None, :]
            dy = y[:, None] - py[None, :]
            clear = np.sqrt(dx * dx + dy * dy) - contact
            coll += np.sum(np.maximum(0.0, margin - clear), axis=1)
            min_clear = np.minimum(min_clear, np.min(clear, axis=1))
        effort += (v * v + w * w) * dt
        outside += (
            np.maximum(0.0, arena[0] - x)
            + np.maximum(0.0, x - arena[1])
            + np.maximum(0.0, arena[2] - y)
            + np.maximum(0.0, y - arena[3])
        )
    dist = np.sqrt((x - goal[0]) ** 2 + (y - goal[1]) ** 2)
    misalign = 1.0 - np.cos(np.arctan2(goal[1] - y, goal[0] - x) - th)
    cost = weights[0] * dist + weights[1] * coll + weights[2] * effort + weights[3] * outside
    cost = cost + weights[4] * dist * misalign
    return cost, min_clear


@jit
def mpc_rollout_costs_nb(pose, seqs, dt, ped_pos, ped_vel, goal, contact, margin, weights, arena):
    n_seq, horizon = seqs.shape[0], seqs.shape[1]
    n_ped = ped_pos.shape[0]
    cost = np.empty(n_seq)
    min_clear = np.empty(n_seq)
    for s in range(n_seq):
        x = pose[0]
        y = pose[1]
        th = pose[2]
        coll = 0.0
        effort = 0.0
        outside = 0.0
        mc = np.inf
        for t in range(horizon):
            v = seqs[s, t, 0]
            w = seqs[s, t, 1]
            x = x + v * np.cos(th) * dt
            y = y + v * np.sin(th) * dt
            th = th + w * dt
            acc = 0.0
            for j in range(n_ped):
                px = ped_pos[j, 0] + ped_vel[j, 0] * dt * (t + 1)
                py = ped_pos[j, 1] + ped_vel[j, 1] * dt * (t + 1)
                dx = x - px
                dy = y - py
                clear = np.sqrt(dx * dx + dy * dy) - contact
                acc += max(0.0, margin - clear)
                if clear < mc:
                    mc = clear
            coll += acc
            effort += (v * v + w * w) * dt
            outside += (
                max(0.0, arena[0] - x) + max(0.0, x - arena[1]) + max(0.0, arena[2] - y) + max(0.0, y - arena[3])
            )
        dist = np.sqrt((x - goal[0]) ** 2 + (y - goal[1]) ** 2)
        misalign = 1.0 - np.cos(np.arctan2(goal[1] - y, goal[0] - x) - th)
        cost[s] = weights[0] * dist + weights[1] * coll + weights[2] * effort + weights[3] * outside
        cost[s] = cost[s] + weights[4] * dist * misalign
        min_clear[s] = mc
    return cost, min_clear


# --------------------------------------------------------------------------
# graph attention helpers
# --------------------------------------------------------------------------


def radius_edges_np(pos, scene_bounds, radius):
    """All ordered pairs ``(k, j)`` inside the same scene with ``|p_k - p_j| <= radius``.

    Scenes are contiguous agent ranges ``scene_bounds[s]:scene_bounds[s + 1]``.
    Self pairs are always included.  Edges come out sorted by ``k`` then ``j``.
    """
    sizes = np.diff(scene_bounds)
    n_agents = pos.shape[0]
    scene_of = np.repeat(np.arange(sizes.shape[0]), sizes)
    per_agent = sizes[scene_of]
    src = np.repeat(np.arange(n_agents), per_agent)
    first = np.cumsum(per_agent) - per_agent
    offs = np.arange(src.shape[0]) - np.repeat(first, per_agent)
    dst = scene_bounds[scene_of[src]] + offs
    d2 = (pos[src, 0] - pos[dst, 0]) ** 2 + (pos[src, 1] - pos[dst, 1]) ** 2
    keep = d2 <= radius * radius
    return src[keep], dst[keep]


@jit
def radius_edges_nb(pos, scene_bounds, radius):
    n_scene = scene_bounds.shape[0] - 1
    r2 = radius * radius
    count = 0
    for s in range(n_scene):
        for k in range(scene_bounds[s], scene_bounds[s + 1]):
            for j in range(scene_bounds[s], scene_bounds[s + 1]):
                d2 = (pos[k, 0] - pos[j, 0]) ** 2 + (pos[k, 1] - pos[j, 1]) ** 2
                if d2 <= r2:
                    count += 1
    src = np.empty(count, dtype=np.int64)
    dst = np.empty(count, dtype=np.int64)
    e = 0
    for s in range(n_scene):
        for k in range(scene_bounds[s], scene_bounds[s + 1]):
            for j in range(scene_bounds[s], scene_bounds[s + 1]):
                d2 = (pos[k, 0] - pos[j, 0]) ** 2 + (pos[k, 1] - pos[j, 1]) ** 2
                if d2 <= r2:
                    src[e] = k
                    dst[e] = j
                    e += 1
    return src, dst


def segment_softmax_np(logits, starts):
    """Softmax over contiguous, non-empty segments beginning at ``starts``."""
    counts = np.diff(np.append(starts, logits.shape[0]))
    peak = np.maximum.reduceat(logits, starts)
    ex = np.exp(logits - np.repeat(peak, counts))
    total = np.add.reduceat(ex, starts)
    return ex / np.repeat(total, counts)


@jit
def segment_softmax_nb(logits, starts):
    n = logits.shape[0]
    out = np.empty(n)
    n_seg = starts.shape[0]
    for g in range(n_seg):
        lo = starts[g]
        hi = starts[g + 1] if g + 1 < n_seg else n
        peak = logits[lo]
        for e in range(lo + 1, hi):
            if logits[e] > peak:
                peak = logits[e]
        total = 0.0
        for e in range(lo, hi):
            out[e] = np.exp(logits[e] - peak)
            total += out[e]
        for e in range(lo, hi):
            out[e] = out[e] / total
    return out


social_forces = select(social_forces_nb, social_forces_np)
mpc_rollout_costs = select(mpc_rollout_costs_nb, mpc_rollout_costs_np)
radius_edges = select(radius_edges_nb, radius_edges_np)
segment_softmax = select(segment_softmax_nb, segment_softmax_np)
