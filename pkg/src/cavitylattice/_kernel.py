"""Compiled inner loop for Monte Carlo wave-function trajectories.

Dormand-Prince 5(4) with its continuous extension, in integrating-factor
(Lawson) form, applied to i d/dt psi = (H_eff - shift) psi.  The state is held as a real array
``Y[2, nph + 2, nj + 2 s]`` (real and imaginary parts) padded with one ghost
row on each side of the photon axis and ``s`` ghost columns on each side of
the momentum axis, so the stencil needs no boundary branches.  Ghost cells
are never written and stay zero.

The kernel advances one trajectory until ``t_final``, until it runs out of
uniform draws, until the jump buffer is full, or until the step collapses;
the Python driver refills buffers and resumes.
"""
from __future__ import annotations

import numpy as np
from numba import njit

# no reassociation: results stay bit-reproducible and exact zeros stay zero
_jit = njit(cache=True, nogil=True, fastmath={"nnan", "ninf"})

STATUS_DONE = 0
STATUS_NEED_DRAWS = 1
STATUS_JUMP_BUFFER_FULL = 2
STATUS_STEP_COLLAPSE = 3

# Dormand-Prince 5(4)
DP_A = np.zeros((6, 5))
DP_A[1, :1] = [1 / 5]
DP_A[2, :2] = [3 / 40, 9 / 40]
DP_A[3, :3] = [44 / 45, -56 / 15, 32 / 9]
DP_A[4, :4] = [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]
DP_A[5, :5] = [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]
DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
DP_E = np.array([-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
# y(t + th h) = y + h sum_i k_i sum_p P[i, p] th**(p + 1)
DP_P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])


def pad_state(psi: np.ndarray, step: int) -> np.ndarray:
    nph, nj = psi.shape
    y = np.zeros((2, nph + 2, nj + 2 * step))
    y[0, 1:-1, step:-step] = psi.real
    y[1, 1:-1, step:-step] = psi.imag
    return y


def unpad_state(y: np.ndarray, step: int) -> np.ndarray:
    return y[0, 1:-1, step:-step] + 1j * y[1, 1:-1, step:-step]


@_jit
def _phase_vec(theta, d, c, sn):
    for i in range(d.shape[0]):
        c[i] = np.cos(theta * d[i])
        sn[i] = np.sin(theta * d[i])


@_jit
def _combine_rot(y0, G, w, cn, sn, cj, sj, s, out):
    """out = exp(-i theta D) (y0 + sum_q w[q] G[q]) with D[n, k] = d_n[n] + d_j[k].

    The phase comes as cos/sin of theta d_n (cn, sn) and theta d_j (cj, sj).
    ``y0`` and ``G`` are flat views of padded states; ``out`` is padded.
    """
    nph = out.shape[1] - 2
    width = out.shape[2]
    nj = width - 2 * s
    half = (nph + 2) * width
    w0 = w[0]
    w1 = w[1]
    w2 = w[2]
    w3 = w[3]
    w4 = w[4]
    w5 = w[5]
    w6 = w[6]
    k0 = G[0]
    k1 = G[1]
    k2 = G[2]
    k3 = G[3]
    k4 = G[4]
    k5 = G[5]
    k6 = G[6]
    o_re = out[0]
    o_im = out[1]
    for n in range(nph):
        an = cn[n]
        bn = sn[n]
        base = (n + 1) * width + s
        ore = o_re[n + 1]
        oim = o_im[n + 1]
        for k in range(nj):
            i = base + k
            m = i + half
            vr = (y0[i] + w0 * k0[i] + w1 * k1[i] + w2 * k2[i] + w3 * k3[i]
                  + w4 * k4[i] + w5 * k5[i] + w6 * k6[i])
            vi = (y0[m] + w0 * k0[m] + w1 * k1[m] + w2 * k2[m] + w3 * k3[m]
                  + w4 * k4[m] + w5 * k5[m] + w6 * k6[m])
            # (cr - i sr) = exp(-i theta (d_n + d_j))
            cr = an * cj[k] - bn * sj[k]
            sr = bn * cj[k] + an * sj[k]
            ore[k + s] = cr * vr + sr * vi
            oim[k + s] = cr * vi - sr * vr


@_jit
def _combine_norm2(y0, G, w):
    """|y0 + sum_q w[q] G[q]|^2 without storing the combination."""
    w0 = w[0]
    w1 = w[1]
    w2 = w[2]
    w3 = w[3]
    w4 = w[4]
    w5 = w[5]
    w6 = w[6]
    k0 = G[0]
    k1 = G[1]
    k2 = G[2]
    k3 = G[3]
    k4 = G[4]
    k5 = G[5]
    k6 = G[6]
    acc = 0.0
    for i in range(y0.size):
        v = (y0[i] + w0 * k0[i] + w1 * k1[i] + w2 * k2[i] + w3 * k3[i]
             + w4 * k4[i] + w5 * k5[i] + w6 * k6[i])
        acc += v * v
    return acc


@_jit
def _rhs_rot(y, out, out_plain, cn, sn, cj, sj, s, u0, eta, kappa, sq):
    """out = exp(+i theta D) (-i N y), N = H_eff minus its real diagonal D.

    N holds the lattice hopping (j -> j +- 2), the pump and the damping
    -i kappa n.  If ``out_plain`` has the state's shape it also receives the
    unrotated -i N y.
    """
    nph = y.shape[1] - 2
    nj = y.shape[2] - 2 * s
    pr = y[0]
    pi = y[1]
    plain = out_plain.shape[0] == 2
    for n in range(nph):
        fn = float(n)
        dim_ = -kappa * fn
        g = 0.25 * u0 * fn
        cu = eta * sq[n + 1]
        cd = eta * sq[n]
        a0 = pr[n + 1]
        b0 = pi[n + 1]
        ap = pr[n + 2]
        bp = pi[n + 2]
        am = pr[n]
        bm = pi[n]
        o1 = out[0, n + 1]
        o2 = out[1, n + 1]
        an = cn[n]
        bn = sn[n]
        for k in range(s, s + nj):
            vr = -dim_ * b0[k] + g * (a0[k - s] + a0[k + s])
            vi = dim_ * a0[k] + g * (b0[k - s] + b0[k + s])
            # -i v  -  eta (sqrt(n+1) psi[n+1] - sqrt(n) psi[n-1])
            f1 = vi - (cu * ap[k] - cd * am[k])
            f2 = -vr - (cu * bp[k] - cd * bm[k])
            cr = an * cj[k - s] - bn * sj[k - s]
            sr = bn * cj[k - s] + an * sj[k - s]
            o1[k] = cr * f1 - sr * f2
            o2[k] = cr * f2 + sr * f1
            if plain:
                out_plain[0, n + 1, k] = f1
                out_plain[1, n + 1, k] = f2


@_jit
def _norm2(y):
    s = 0.0
    for i in range(y.size):
        s += y[i] * y[i]
    return s


@_jit
def _dense_weights(h, th, P, w):
    for i in range(7):
        acc = 0.0
        tp = th
        for p in range(4):
            acc += P[i, p] * tp
            tp *= th
        w[i] = h * acc


@_jit
def observe(y, s, js2, js_odd, sq, pn, pj, joint):
    """Observables of the normalized version of the padded state ``y``.

    Fills pn (photon distribution), pj (momentum distribution) and, if
    ``joint`` has rows, the joint distribution.  Returns
    (n_mean, e_kin, bunching, alpha_re, alpha_im, odd_weight, boundary_weight).
    """
    nph = y.shape[1] - 2
    nj = y.shape[2] - 2 * s
    pr = y[0]
    pi = y[1]
    nrm = 0.0
    for n in range(1, nph + 1):
        for k in range(s, s + nj):
            nrm += pr[n, k] * pr[n, k] + pi[n, k] * pi[n, k]
    inv = 1.0 / nrm
    for k in range(nj):
        pj[k] = 0.0
    n_mean = 0.0
    ekin = 0.0
    bsum = 0.0
    are = 0.0
    aim = 0.0
    odd = 0.0
    bpop = 0.0
    has_joint = joint.shape[0] > 0
    for n in range(nph):
        a0 = pr[n + 1]
        b0 = pi[n + 1]
        ap = pr[n + 2]
        bp = pi[n + 2]
        row = 0.0
        cr = 0.0
        ci = 0.0
        cb = 0.0
        for k in range(s, s + nj):
            pz = (a0[k] * a0[k] + b0[k] * b0[k]) * inv
            row += pz
            pj[k - s] += pz
            ekin += pz * js2[k - s]
            if js_odd[k - s]:
                odd += pz
            if has_joint:
                joint[n, k - s] = pz
            # <psi_n | psi_{n+1}> for <a>; ghost row is zero at the top
            cr += a0[k] * ap[k] + b0[k] * bp[k]
            ci += a0[k] * bp[k] - b0[k] * ap[k]
            # <psi | psi shifted by 2 k_R>
            cb += a0[k] * a0[k + s] + b0[k] * b0[k + s]
        pn[n] = row
        n_mean += n * row
        are += sq[n + 1] * cr
        aim += sq[n + 1] * ci
        bsum += cb
        if n == nph - 1:
            bpop += row
        else:
            e0 = s
            e1 = s + nj - 1
            bpop += (a0[e0] * a0[e0] + b0[e0] * b0[e0] + a0[e1] * a0[e1] + b0[e1] * b0[e1]) * inv
    return n_mean, ekin, 0.5 + 0.5 * bsum * inv, are * inv, aim * inv, odd, bpop


@_jit
def _record(y, slot, s, js2, js_odd, sq, out_scalar, out_pn, out_pj, joint_slot, joint_out):
    if joint_slot >= 0:
        jt = joint_out[joint_slot]
    else:
        jt = joint_out[:0, 0]
    res = observe(y, s, js2, js_odd, sq, out_pn[slot], out_pj[slot], jt)
    for q in range(7):
        out_scalar[slot, q] = res[q]


@_jit
def propagate(y, t, t_final, h, r, js2, js_odd, s, dc, u0, eta, kappa, shift, tol,
              sample_times, i_sample, joint_slots, draws, i_draw, jump_times, n_jumps,
              out_scalar, out_pn, out_pj, joint_out, A, B, C, E, P, h_min):
    """Advance one trajectory in place.

    ``y`` is unnormalized between jumps; ``r`` is the jump threshold on its
    squared norm (negative: draw a new one).  ``out_scalar[i]`` receives
    (n, e_kin, b, Re a, Im a, odd weight, boundary weight) at sample i.
    Returns (status, t, h, r, i_sample, i_draw, n_jumps, n_steps).

    The real diagonal part D of H_eff - shift (kinetic energy, bare cavity
    detuning and the mean lattice shift) is integrated exactly: each step
    works on v(tau) = exp(i D tau) psi(t + tau), which obeys
    dv/dtau = exp(i D tau) (-i N) exp(-i D tau) v with N the rest of H_eff.
    Since exp(-i D tau) is unitary, |v| = |psi| and the jump threshold can
    be located on v directly.
    """
    nph = y.shape[1] - 2
    nj = y.shape[2] - 2 * s
    sq = np.sqrt(np.arange(0, nph + 2).astype(np.float64))
    d_n = np.empty(nph)
    for n in range(nph):
        d_n[n] = -n * dc + 0.5 * u0 * n
    d_j = js2 - shift
    shape = y.shape
    size = y.size
    G4 = np.zeros((7,) + shape)          # stage derivatives in the frame at t
    G = G4.reshape((7, size))
    cn = np.empty((7, nph))
    sn = np.empty((7, nph))
    cj = np.empty((7, nj))
    sj = np.empty((7, nj))
    cn1 = np.empty(nph)
    sn1 = np.empty(nph)
    cj1 = np.empty(nj)
    sj1 = np.empty(nj)
    stage = np.zeros(shape)
    ynew = np.zeros(shape)
    work = np.zeros(shape)
    no_plain = np.zeros((0, 1, 1))
    yf = y.reshape(size)
    w = np.zeros(7)
    n_samples = sample_times.shape[0]
    n_steps = 0
    h_phase = -1.0

    if r < 0.0:
        if i_draw >= draws.shape[0]:
            return STATUS_NEED_DRAWS, t, h, r, i_sample, i_draw, n_jumps, n_steps
        r = draws[i_draw]
        i_draw += 1

    while i_sample < n_samples and sample_times[i_sample] <= t:
        _record(y, i_sample, s, js2, js_odd, sq, out_scalar, out_pn, out_pj,
                joint_slots[i_sample], joint_out)
        i_sample += 1

    _phase_vec(0.0, d_n, cn1, sn1)
    _phase_vec(0.0, d_j, cj1, sj1)
    _rhs_rot(y, G4[0], no_plain, cn1, sn1, cj1, sj1, s, u0, eta, kappa, sq)
    nrm2_old = _norm2(yf)
    while t < t_final:
        if h < h_min:
            return STATUS_STEP_COLLAPSE, t, h, r, i_sample, i_draw, n_jumps, n_steps
        if t + h > t_final:
            h = t_final - t
        if h != h_phase:
            for st in range(1, 7):
                _phase_vec(C[st] * h, d_n, cn[st], sn[st])
                _phase_vec(C[st] * h, d_j, cj[st], sj[st])
            h_phase = h
        for st in range(1, 6):
            for q in range(7):
                w[q] = h * A[st, q] if q < st else 0.0
            _combine_rot(yf, G, w, cn[st], sn[st], cj[st], sj[st], s, stage)
            _rhs_rot(stage, G4[st], no_plain, cn[st], sn[st], cj[st], sj[st], s, u0, eta, kappa, sq)
        for q in range(6):
            w[q] = h * B[q]
        w[6] = 0.0
        _combine_rot(yf, G, w, cn[6], sn[6], cj[6], sj[6], s, ynew)
        # FSAL stage; ``work`` keeps the unrotated derivative for the next step
        _rhs_rot(ynew, G4[6], work, cn[6], sn[6], cj[6], sj[6], s, u0, eta, kappa, sq)
        err2 = 0.0
        e0 = E[0]
        e2 = E[2]
        e3 = E[3]
        e4 = E[4]
        e5 = E[5]
        e6 = E[6]
        k0 = G[0]
        k2 = G[2]
        k3 = G[3]
        k4 = G[4]
        k5 = G[5]
        k6 = G[6]
        for i in range(size):
            e = e0 * k0[i] + e2 * k2[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] + e6 * k6[i]
            err2 += e * e
        err = h * np.sqrt(err2 / nrm2_old) / tol
        n_steps += 1
        if err > 1.0:
            h *= max(0.2, 0.9 * err ** -0.2)
            continue

        nrm2_new = _norm2(ynew.reshape(size))
        t_end = t + h
        jumped = False
        th_star = 1.0
        if nrm2_new < r:
            # Illinois iteration for |v(th)|^2 = r on (0, 1]
            a_th = 0.0
            b_th = 1.0
            ga = nrm2_old - r
            gb = nrm2_new - r
            side = 0
            th = 1.0
            for _ in range(200):
                th = (a_th * gb - b_th * ga) / (gb - ga)
                _dense_weights(h, th, P, w)
                g = _combine_norm2(yf, G, w) - r
                if g > 0.0:
                    a_th = th
                    ga = g
                    if side == 1:
                        gb *= 0.5
                    side = 1
                else:
                    b_th = th
                    gb = g
                    if side == -1:
                        ga *= 0.5
                    side = -1
                if (b_th - a_th) * h < 1e-12 or abs(g) <= 1e-14 * r:
                    break
            th_star = th
            t_end = t + th_star * h
            jumped = True

        while i_sample < n_samples and sample_times[i_sample] <= t_end:
            th = (sample_times[i_sample] - t) / h
            _dense_weights(h, th, P, w)
            _phase_vec(th * h, d_n, cn1, sn1)
            _phase_vec(th * h, d_j, cj1, sj1)
            _combine_rot(yf, G, w, cn1, sn1, cj1, sj1, s, stage)
            _record(stage, i_sample, s, js2, js_odd, sq, out_scalar, out_pn, out_pj,
                    joint_slots[i_sample], joint_out)
            i_sample += 1

        if jumped:
            _dense_weights(h, th_star, P, w)
            _phase_vec(th_star * h, d_n, cn1, sn1)
            _phase_vec(th_star * h, d_j, cj1, sj1)
            _combine_rot(yf, G, w, cn1, sn1, cj1, sj1, s, stage)
            # y <- a psi(t*) / |a psi(t*)|
            s2 = 0.0
            for c in range(2):
                for n in range(1, nph + 1):
                    f = sq[n]
                    for k in range(shape[2]):
                        v = f * stage[c, n + 1, k]
                        y[c, n, k] = v
                        s2 += v * v
            if s2 == 0.0:
                # threshold crossed through integration error on a photon-free state
                y[:] = stage
                s2 = _norm2(yf)
            inv = 1.0 / np.sqrt(s2)
            for i in range(size):
                yf[i] *= inv
            t = t_end
            jump_times[n_jumps] = t
            n_jumps += 1
            _phase_vec(0.0, d_n, cn1, sn1)
            _phase_vec(0.0, d_j, cj1, sj1)
            _rhs_rot(y, G4[0], no_plain, cn1, sn1, cj1, sj1, s, u0, eta, kappa, sq)
            nrm2_old = 1.0
            r = -1.0
            if n_jumps >= jump_times.shape[0]:
                return STATUS_JUMP_BUFFER_FULL, t, h, r, i_sample, i_draw, n_jumps, n_steps
            if i_draw >= draws.shape[0]:
                return STATUS_NEED_DRAWS, t, h, r, i_sample, i_draw, n_jumps, n_steps
            r = draws[i_draw]
            i_draw += 1
        else:
            y[:] = ynew
            G4[0] = work
            nrm2_old = nrm2_new
            t = t_end
        if err < 1e-10:
            h *= 10.0
        else:
            h *= min(10.0, 0.9 * err ** -0.2)
    return STATUS_DONE, t, h, r, i_sample, i_draw, n_jumps, n_steps
