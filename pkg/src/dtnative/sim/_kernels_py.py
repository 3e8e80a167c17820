"""Pure-Python car-following kernel.

Reference implementation of the compiled kernel in ``_ckernels.pyx``. Both
perform the same floating point operations in the same order, so results are
bit-identical; tests assert this.
"""

import math


def next_speed(v, limit, has_leader, gap, v_leader, red, dist, dt, accel, decel):
    """Krauss-style speed update for one vehicle.

    ``gap`` is the free space to the leader's rear minus the standstill gap;
    ``dist`` is the distance to the stop line, used only when ``red``.
    """
    vn = v + accel * dt
    if vn > limit:
        vn = limit
    if has_leader:
        if gap < 0.0:
            gap = 0.0
        bd = decel * dt
        vsafe = -bd + math.sqrt(bd * bd + v_leader * v_leader + 2.0 * decel * gap)
        vgap = gap / dt
        if vgap < vsafe:
            vsafe = vgap
        if vsafe < vn:
            vn = vsafe
    if red:
        if dist < 0.0:
            dist = 0.0
        vstop = math.sqrt(2.0 * decel * dist)
        vd = dist / dt
        if vd < vstop:
            vstop = vd
        if vstop < vn:
            vn = vstop
    if vn < 0.0:
        vn = 0.0
    return vn


def step_vehicles(order, lane, pos, speed, ridx, route, routes, route_len,
                  lane_len, lane_limit, lane_red, dt, accel, decel, veh_len, min_gap):
    """Advance every vehicle one step using a snapshot of the previous state.

    ``order`` sorts vehicles by (lane, position descending). Arrays are
    updated in place; returns a list of 0/1 retirement flags.
    """
    n = len(lane)
    order = [int(i) for i in order]
    lane_l = [int(x) for x in lane]
    pos_l = [float(x) for x in pos]
    spd_l = [float(x) for x in speed]
    ridx_l = [int(x) for x in ridx]
    route_l = [int(x) for x in route]
    llen = [float(x) for x in lane_len]
    llim = [float(x) for x in lane_limit]
    lred = [int(x) for x in lane_red]
    rlen = [int(x) for x in route_len]
    rts = [[int(x) for x in row] for row in routes]

    leader = [-1] * n
    tail = [-1] * len(llen)
    prev = -1
    for i in order:
        if prev >= 0 and lane_l[prev] == lane_l[i]:
            leader[i] = prev
        tail[lane_l[i]] = i
        prev = i

    new_lane = list(lane_l)
    new_pos = list(pos_l)
    new_spd = list(spd_l)
    new_ridx = list(ridx_l)
    retired = [0] * n
    for i in range(n):
        li = lane_l[i]
        has_leader = False
        gap = 0.0
        vl = 0.0
        j = leader[i]
        if j >= 0:
            has_leader = True
            gap = pos_l[j] - pos_l[i] - veh_len - min_gap
            vl = spd_l[j]
        else:
            r = route_l[i]
            k = ridx_l[i] + 1
            if k < rlen[r]:
                t = tail[rts[r][k]]
                if t >= 0:
                    has_leader = True
                    gap = (llen[li] - pos_l[i]) + pos_l[t] - veh_len - min_gap
                    vl = spd_l[t]
        vn = next_speed(spd_l[i], llim[li], has_leader, gap, vl,
                        lred[li] != 0, llen[li] - pos_l[i], dt, accel, decel)
        p = pos_l[i] + vn * dt
        if p > llen[li]:
            r = route_l[i]
            k = ridx_l[i] + 1
            if k < rlen[r]:
                p = p - llen[li]
                new_lane[i] = rts[r][k]
                new_ridx[i] = k
            else:
                retired[i] = 1
                p = llen[li]
        new_pos[i] = p
        new_spd[i] = vn

    for i in range(n):
        lane[i] = new_lane[i]
        pos[i] = new_pos[i]
        speed[i] = new_spd[i]
        ridx[i] = new_ridx[i]
    return retired
