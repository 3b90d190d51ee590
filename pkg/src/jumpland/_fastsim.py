"""Compiled per-environment physics tick, numerically equivalent to the numpy path."""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _height(h, ox, oy, cell, x, y):
    rows, cols = h.shape
    gx = min(max((x - ox) / cell, 0.0), cols - 1.0)
    gy = min(max((y - oy) / cell, 0.0), rows - 1.0)
    j0 = min(int(gx), cols - 2)
    i0 = min(int(gy), rows - 2)
    tx = gx - j0
    ty = gy - i0
    return (h[i0, j0] * (1 - tx) * (1 - ty) + h[i0, j0 + 1] * tx * (1 - ty)
            + h[i0 + 1, j0] * (1 - tx) * ty + h[i0 + 1, j0 + 1] * tx * ty)


@njit(cache=True)
def step_kernel(pos, quat, vel, omega, q, qd, contact, anchor, targets, kp, kd, ext_tau, use_ext,
                heights, ox, oy, cell, mu, kn, dn, kt, dt, rotor, limit, mass, inertia, hips, lateral, l1, l2):
    B = pos.shape[0]
    pos_n = np.empty_like(pos)
    quat_n = np.empty_like(quat)
    vel_n = np.empty_like(vel)
    om_n = np.empty_like(omega)
    q_n = np.empty_like(q)
    qd_n = np.empty_like(qd)
    touch_n = np.empty_like(contact)
    anchor_n = np.empty_like(anchor)
    tau_out = np.empty_like(q)
    force_out = np.empty((B, 4, 3))
    R = np.empty((3, 3))
    J = np.empty((3, 3))
    foot = np.empty(3)
    fb = np.empty(3)
    fw = np.empty(3)
    fv = np.empty(3)
    g = np.empty(3)
    a = np.empty(3)
    dg = np.empty(3)
    for b in range(B):
        w, x, y, z = quat[b, 0], quat[b, 1], quat[b, 2], quat[b, 3]
        R[0, 0] = 1 - 2 * (y * y + z * z); R[0, 1] = 2 * (x * y - w * z); R[0, 2] = 2 * (x * z + w * y)
        R[1, 0] = 2 * (x * y + w * z); R[1, 1] = 1 - 2 * (x * x + z * z); R[1, 2] = 2 * (y * z - w * x)
        R[2, 0] = 2 * (x * z - w * y); R[2, 1] = 2 * (y * z + w * x); R[2, 2] = 1 - 2 * (x * x + y * y)
        Fx = 0.0; Fy = 0.0; Fz = 0.0
        Tx = 0.0; Ty = 0.0; Tz = 0.0
        for leg in range(4):
            r0 = q[b, 3 * leg]; t1 = q[b, 3 * leg + 1]; t12 = t1 + q[b, 3 * leg + 2]
            d = lateral[leg]
            px = l1 * math.sin(t1) + l2 * math.sin(t12)
            pz = -l1 * math.cos(t1) - l2 * math.cos(t12)
            c = math.cos(r0); s = math.sin(r0)
            foot[0] = hips[leg, 0] + px
            foot[1] = hips[leg, 1] + c * d - s * pz
            foot[2] = hips[leg, 2] + s * d + c * pz
            dx1 = l1 * math.cos(t1) + l2 * math.cos(t12); dx2 = l2 * math.cos(t12)
            dz1 = l1 * math.sin(t1) + l2 * math.sin(t12); dz2 = l2 * math.sin(t12)
            J[0, 0] = 0.0; J[1, 0] = -s * d - c * pz; J[2, 0] = c * d - s * pz
            J[0, 1] = dx1; J[1, 1] = -s * dz1; J[2, 1] = c * dz1
            J[0, 2] = dx2; J[1, 2] = -s * dz2; J[2, 2] = c * dz2
            # foot velocity in the body frame
            vb0 = omega[b, 1] * foot[2] - omega[b, 2] * foot[1]
            vb1 = omega[b, 2] * foot[0] - omega[b, 0] * foot[2]
            vb2 = omega[b, 0] * foot[1] - omega[b, 1] * foot[0]
            for i in range(3):
                acc = 0.0
                for j in range(3):
                    acc += J[i, j] * qd[b, 3 * leg + j]
                if i == 0:
                    vb0 += acc
                elif i == 1:
                    vb1 += acc
                else:
                    vb2 += acc
            for i in range(3):
                fw[i] = pos[b, i] + R[i, 0] * foot[0] + R[i, 1] * foot[1] + R[i, 2] * foot[2]
                fv[i] = vel[b, i] + R[i, 0] * vb0 + R[i, 1] * vb1 + R[i, 2] * vb2
            ground = _height(heights, ox, oy, cell, fw[0], fw[1])
            depth = ground - fw[2]
            touching = depth > 0
            fn_raw = kn * depth - dn * fv[2]
            fn = max(fn_raw, 0.0) if touching else 0.0
            if touching and contact[b, leg]:
                ax = anchor[b, leg, 0]; ay = anchor[b, leg, 1]
            else:
                ax = fw[0]; ay = fw[1]
            ftx = -kt * (fw[0] - ax); fty = -kt * (fw[1] - ay)
            cap = mu[b] * fn
            mag = math.sqrt(ftx * ftx + fty * fty)
            if mag > cap:
                sc = cap / mag if mag > 0 else 1.0
                ftx *= sc; fty *= sc
                ax = fw[0] + ftx / kt; ay = fw[1] + fty / kt
            anchor_n[b, leg, 0] = ax; anchor_n[b, leg, 1] = ay
            touch_n[b, leg] = touching
            damp = dn if (touching and fn_raw > 0) else 0.0
            force_out[b, leg, 0] = ftx; force_out[b, leg, 1] = fty; force_out[b, leg, 2] = fn
            Fx += ftx; Fy += fty; Fz += fn
            for i in range(3):
                fb[i] = R[0, i] * ftx + R[1, i] * fty + R[2, i] * fn
            Tx += foot[1] * fb[2] - foot[2] * fb[1]
            Ty += foot[2] * fb[0] - foot[0] * fb[2]
            Tz += foot[0] * fb[1] - foot[1] * fb[0]
            # joint accelerations: (rotor I + dt (dn a a^T + diag kd)) qdd = tau + J^T f_b
            for j in range(3):
                k = 3 * leg + j
                if use_ext:
                    tau = ext_tau[b, k]
                    kde = 0.0
                else:
                    raw = kp[k] * (targets[b, k] - q[b, k]) - kd[k] * qd[b, k]
                    tau = min(max(raw, -limit), limit)
                    kde = kd[k] if abs(raw) < limit else 0.0
                tau_out[b, k] = tau
                g[j] = tau + J[0, j] * fb[0] + J[1, j] * fb[1] + J[2, j] * fb[2]
                a[j] = J[0, j] * R[2, 0] + J[1, j] * R[2, 1] + J[2, j] * R[2, 2]
                dg[j] = rotor + dt * kde
            cdn = dt * damp
            sa = 0.0; sg = 0.0
            for j in range(3):
                sa += a[j] * a[j] / dg[j]
                sg += a[j] * g[j] / dg[j]
            corr = cdn * sg / (1.0 + cdn * sa)
            for j in range(3):
                k = 3 * leg + j
                qdd = (g[j] - corr * a[j]) / dg[j]
                qd_n[b, k] = qd[b, k] + dt * qdd
                q_n[b, k] = q[b, k] + dt * qd_n[b, k]
        # base translation, gravity exact
        vel_n[b, 0] = vel[b, 0] + dt * Fx / mass
        vel_n[b, 1] = vel[b, 1] + dt * Fy / mass
        vel_n[b, 2] = vel[b, 2] + dt * (Fz / mass - 9.81)
        pos_n[b, 0] = pos[b, 0] + dt * vel_n[b, 0]
        pos_n[b, 1] = pos[b, 1] + dt * vel_n[b, 1]
        pos_n[b, 2] = pos[b, 2] + dt * vel_n[b, 2] + 0.5 * dt * dt * 9.81
        # rotation
        w0, w1, w2 = omega[b, 0], omega[b, 1], omega[b, 2]
        I0, I1, I2 = inertia[0], inertia[1], inertia[2]
        n0 = w0 + dt * (Tx - (w1 * I2 * w2 - w2 * I1 * w1)) / I0
        n1 = w1 + dt * (Ty - (w2 * I0 * w0 - w0 * I2 * w2)) / I1
        n2 = w2 + dt * (Tz - (w0 * I1 * w1 - w1 * I0 * w0)) / I2
        om_n[b, 0] = n0; om_n[b, 1] = n1; om_n[b, 2] = n2
        rx = dt * n0; ry = dt * n1; rz = dt * n2
        ang = math.sqrt(rx * rx + ry * ry + rz * rz)
        kk = math.sin(0.5 * ang) / ang if ang > 1e-12 else 0.5
        bw = math.cos(0.5 * ang); bx = kk * rx; by = kk * ry; bz = kk * rz
        qw = w * bw - x * bx - y * by - z * bz
        qx = w * bx + x * bw + y * bz - z * by
        qy = w * by - x * bz + y * bw + z * bx
        qz = w * bz + x * by - y * bx + z * bw
        nrm = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        quat_n[b, 0] = qw / nrm; quat_n[b, 1] = qx / nrm; quat_n[b, 2] = qy / nrm; quat_n[b, 3] = qz / nrm
    return pos_n, quat_n, vel_n, om_n, q_n, qd_n, touch_n, anchor_n, tau_out, force_out
