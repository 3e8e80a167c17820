# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled car-following kernel; mirrors _kernels_py operation for operation."""

from libc.math cimport sqrt
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline double _next_speed(double v, double limit, bint has_leader, double gap,
                               double v_leader, bint red, double dist, double dt,
                               double accel, double decel) nogil:
    cdef double vn, bd, vsafe, vgap, vstop, vd
    vn = v + accel * dt
    if vn > limit:
        vn = limit
    if has_leader:
        if gap < 0.0:
            gap = 0.0
        bd = decel * dt
        vsafe = -bd + sqrt(bd * bd + v_leader * v_leader + 2.0 * decel * gap)
        vgap = gap / dt
        if vgap < vsafe:
            vsafe = vgap
        if vsafe < vn:
            vn = vsafe
    if red:
        if dist < 0.0:
            dist = 0.0
        vstop = sqrt(2.0 * decel * dist)
        vd = dist / dt
        if vd < vstop:
            vstop = vd
        if vstop < vn:
            vn = vstop
    if vn < 0.0:
        vn = 0.0
    return vn


def next_speed(double v, double limit, has_leader, double gap, double v_leader,
               red, double dist, double dt, double accel, double decel):
    return _next_speed(v, limit, bool(has_leader), gap, v_leader, bool(red), dist,
                       dt, accel, decel)


def step_vehicles(order, lane, pos, speed, ridx, route, routes, route_len,
                  lane_len, lane_limit, lane_red, double dt, double accel,
                  double decel, double veh_len, double min_gap):
    cdef long[::1] o = np.ascontiguousarray(order, dtype=np.int_)
    cdef long[::1] ln = np.ascontiguousarray(lane, dtype=np.int_)
    cdef double[::1] ps = np.ascontiguousarray(pos, dtype=np.float64)
    cdef double[::1] sp = np.ascontiguousarray(speed, dtype=np.float64)
    cdef long[::1] ri = np.ascontiguousarray(ridx, dtype=np.int_)
    cdef long[::1] ro = np.ascontiguousarray(route, dtype=np.int_)
    cdef long[:, ::1] rts = np.ascontiguousarray(routes, dtype=np.int_)
    cdef long[::1] rlen = np.ascontiguousarray(route_len, dtype=np.int_)
    cdef double[::1] llen = np.ascontiguousarray(lane_len, dtype=np.float64)
    cdef double[::1] llim = np.ascontiguousarray(lane_limit, dtype=np.float64)
    cdef long[::1] lred = np.ascontiguousarray(lane_red, dtype=np.int_)

    cdef Py_ssize_t n = ln.shape[0]
    cdef Py_ssize_t nl = llen.shape[0]
    cdef Py_ssize_t a, i, j, t, li, r, k, prev
    cdef bint has_leader
    cdef double gap, vl, vn, p

    leader_arr = np.full(n, -1, dtype=np.int_)
    tail_arr = np.full(nl, -1, dtype=np.int_)
    out_lane = np.empty(n, dtype=np.int_)
    out_pos = np.empty(n, dtype=np.float64)
    out_spd = np.empty(n, dtype=np.float64)
    out_ridx = np.empty(n, dtype=np.int_)
    retired_arr = np.zeros(n, dtype=np.uint8)
    cdef long[::1] leader = leader_arr
    cdef long[::1] tail = tail_arr
    cdef long[::1] nlane = out_lane
    cdef double[::1] npos = out_pos
    cdef double[::1] nspd = out_spd
    cdef long[::1] nridx = out_ridx
    cdef unsigned char[::1] retired = retired_arr

    prev = -1
    for a in range(n):
        i = o[a]
        if prev >= 0 and ln[prev] == ln[i]:
            leader[i] = prev
        tail[ln[i]] = i
        prev = i

    for i in range(n):
        li = ln[i]
        has_leader = False
        gap = 0.0
        vl = 0.0
        nlane[i] = li
        nridx[i] = ri[i]
        j = leader[i]
        if j >= 0:
            has_leader = True
            gap = ps[j] - ps[i] - veh_len - min_gap
            vl = sp[j]
        else:
            r = ro[i]
            k = ri[i] + 1
            if k < rlen[r]:
                t = tail[rts[r, k]]
                if t >= 0:
                    has_leader = True
                    gap = (llen[li] - ps[i]) + ps[t] - veh_len - min_gap
                    vl = sp[t]
        vn = _next_speed(sp[i], llim[li], has_leader, gap, vl, lred[li] != 0,
                         llen[li] - ps[i], dt, accel, decel)
        p = ps[i] + vn * dt
        if p > llen[li]:
            r = ro[i]
            k = ri[i] + 1
            if k < rlen[r]:
                p = p - llen[li]
                nlane[i] = rts[r, k]
                nridx[i] = k
            else:
                retired[i] = 1
                p = llen[li]
        npos[i] = p
        nspd[i] = vn

    lane[:] = out_lane
    pos[:] = out_pos
    speed[:] = out_spd
    ridx[:] = out_ridx
    return retired_arr
