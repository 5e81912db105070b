"""Eigenvalue plane cost, its analytic derivatives, LM and pose covariance.

Pose perturbations are right-multiplicative, ``T <- T Exp(xi)`` with
``xi = [omega, rho]``.  The per-feature cost is the smallest eigenvalue of
``A = P/N - v v^T / N^2`` of the feature's world-frame cluster, i.e. the mean
squared point-to-plane distance at the best-fit plane.

The Hessian is the exact second derivative of ``cost(T Exp(x))`` at ``x=0``:
first-order eigenvalue perturbation terms, the second-order cluster terms,
and the eigenvector-coupling terms ``2 (u_m^T dA u)^2 / (lambda - lambda_m)``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ..geom import Pose, hat, stack_poses
from . import kernels
from .problem import BADerivatives, BAProblem

log = logging.getLogger(__name__)

DEGENERATE_GAP = 1e-10


@dataclass
class _Packed:
    feat_ptr: np.ndarray   # (F+1,)
    feat_ids: np.ndarray   # (F,)
    view_pose: np.ndarray  # (V,)
    view_feat: np.ndarray  # (V,)
    P: np.ndarray          # (V, 3, 3)
    v: np.ndarray          # (V, 3)
    N: np.ndarray          # (V,)
    Nf: np.ndarray         # (F,)


def pack(problem: BAProblem) -> _Packed:
    ptr, fids, vp, vf, Ps, vs, Ns = [0], [], [], [], [], [], []
    for f in problem.features:
        views = {j: c for j, c in sorted(f.views.items()) if c.N > 0}
        n = sum(c.N for c in views.values())
        if n < 3:
            warnings.warn(f"feature {f.feature_id} has {n} < 3 points; excluded", RuntimeWarning)
            continue
        k = len(fids)
        for j, c in views.items():
            vp.append(j)
            vf.append(k)
            Ps.append(c.P)
            vs.append(c.v)
            Ns.append(c.N)
        fids.append(f.feature_id)
        ptr.append(len(vp))
    V = len(vp)
    packed = _Packed(np.asarray(ptr, dtype=np.int64), np.asarray(fids, dtype=np.int64),
                     np.asarray(vp, dtype=np.int64), np.asarray(vf, dtype=np.int64),
                     np.asarray(Ps, dtype=float).reshape(V, 3, 3),
                     np.asarray(vs, dtype=float).reshape(V, 3),
                     np.asarray(Ns, dtype=float), None)
    packed.Nf = np.bincount(packed.view_feat, weights=packed.N, minlength=len(fids))
    return packed


def _segment_sum(x: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    if len(x) == 0:
        return np.zeros((len(ptr) - 1,) + x.shape[1:])
    return np.add.reduceat(x, ptr[:-1], axis=0)


@dataclass
class _State:
    R: np.ndarray   # per view pose rotation
    Pa: np.ndarray
    va: np.ndarray
    tc: np.ndarray  # pose translation minus feature centre
    S1: np.ndarray  # per feature
    lam: np.ndarray  # (F, 3) ascending
    U: np.ndarray    # (F, 3, 3) columns are eigenvectors


def _evaluate(pk: _Packed, R: np.ndarray, t: np.ndarray) -> _State:
    Rv = R[pk.view_pose]
    tv = t[pk.view_pose]
    va = np.einsum("vij,vj->vi", Rv, pk.v)
    Pa = Rv @ pk.P @ Rv.transpose(0, 2, 1)
    # centre each feature on its current mean for conditioning
    c = _segment_sum(va + pk.N[:, None] * tv, pk.feat_ptr) / pk.Nf[:, None]
    tc = tv - c[pk.view_feat]
    N = pk.N[:, None, None]
    S2v = Pa + va[:, :, None] * tc[:, None, :] + tc[:, :, None] * va[:, None, :] \
        + N * tc[:, :, None] * tc[:, None, :]
    S1 = _segment_sum(va + pk.N[:, None] * tc, pk.feat_ptr)
    S2 = _segment_sum(S2v, pk.feat_ptr)
    Nf = pk.Nf[:, None, None]
    A = S2 / Nf - S1[:, :, None] * S1[:, None, :] / Nf**2
    A = 0.5 * (A + A.transpose(0, 2, 1))
    lam, U = np.linalg.eigh(A)
    return _State(Rv, Pa, va, tc, S1, lam, U)


def plane_cost(problem: BAProblem, poses=None) -> float:
    return _packed_cost(pack(problem), problem.poses if poses is None else poses)


def _packed_cost(pk: _Packed, poses) -> float:
    if len(pk.feat_ids) == 0:
        return 0.0
    R, t = stack_poses(poses)
    return float(_evaluate(pk, R, t).lam[:, 0].sum())


def feature_costs(problem: BAProblem) -> dict[int, float]:
    """Per-feature smallest eigenvalue (debug dump)."""
    pk = pack(problem)
    R, t = stack_poses(problem.poses)
    if len(pk.feat_ids) == 0:
        return {}
    st = _evaluate(pk, R, t)
    return {int(f): float(l) for f, l in zip(pk.feat_ids, st.lam[:, 0])}


def _view_terms(pk: _Packed, st: _State):
    """Per-view gradient pieces, rotated back to each pose's body frame."""
    fi = pk.view_feat
    Nf = pk.Nf[fi]
    Nj = pk.N
    U = st.U[fi]
    u, u1, u2 = U[:, :, 0], U[:, :, 1], U[:, :, 2]
    S1 = st.S1[fi]
    va, Pa, tc = st.va, st.Pa, st.tc
    M = Pa + va[:, :, None] * tc[:, None, :]
    s = va + Nj[:, None] * tc
    w = np.einsum("vij,vj->vi", M, u)
    us1 = np.einsum("vi,vi->v", u, S1)
    su = np.einsum("vi,vi->v", s, u)
    vxu = np.cross(va, u)
    a1 = (1.0 / Nf)[:, None]
    a2 = (1.0 / Nf**2)[:, None]

    g = np.empty((len(fi), 6))
    g[:, :3] = 2 * a1 * np.cross(w, u) - 2 * a2 * us1[:, None] * vxu
    g[:, 3:] = 2 * a1 * u * su[:, None] - 2 * a2 * (us1 * Nj)[:, None] * u

    def coupling(um):
        wm = np.einsum("vij,vj->vi", M, um)
        ums1 = np.einsum("vi,vi->v", um, S1)
        sum_ = np.einsum("vi,vi->v", s, um)
        gm = np.empty((len(fi), 6))
        gm[:, :3] = a1 * (np.cross(w, um) + np.cross(wm, u)) \
            - a2 * (np.cross(va, um) * us1[:, None] + ums1[:, None] * vxu)
        gm[:, 3:] = a1 * (um * su[:, None] + u * sum_[:, None]) \
            - a2 * Nj[:, None] * (um * us1[:, None] + ums1[:, None] * u)
        return gm

    g1, g2 = coupling(u1), coupling(u2)
    d = np.concatenate([vxu, Nj[:, None] * u], axis=1)

    I3 = np.eye(3)
    ux = hat(u)
    mu = np.einsum("vi,vi->v", u, w)
    uva = np.einsum("vi,vi->v", u, va)
    outer = lambda x, y: x[:, :, None] * y[:, None, :]
    Q = np.zeros((len(fi), 6, 6))
    k1 = a1[:, :, None]
    k2 = (2 * us1 / Nf**2)[:, None, None]
    Q[:, :3, :3] = k1 * (outer(u, w) + outer(w, u) - 2 * mu[:, None, None] * I3
                         + 2 * ux @ Pa @ ux.transpose(0, 2, 1)) \
        - k2 * (0.5 * (outer(u, va) + outer(va, u)) - uva[:, None, None] * I3)
    Q[:, :3, 3:] = k1 * (-su[:, None, None] * ux + 2 * outer(vxu, u)) \
        - k2 * (-0.5 * Nj[:, None, None] * ux)
    Q[:, 3:, :3] = Q[:, :3, 3:].transpose(0, 2, 1)
    Q[:, 3:, 3:] = k1 * 2 * Nj[:, None, None] * outer(u, u)

    # primed (world-rotated) -> body coordinates
    Rt = st.R.transpose(0, 2, 1)

    def rot(x):
        return np.concatenate([np.einsum("vij,vj->vi", Rt, x[:, :3]),
                               np.einsum("vij,vj->vi", Rt, x[:, 3:])], axis=1)

    B = np.zeros((len(fi), 6, 6))
    B[:, :3, :3] = st.R
    B[:, 3:, 3:] = st.R
    Q = B.transpose(0, 2, 1) @ Q @ B
    return rot(g), rot(g1), rot(g2), rot(d), Q


def derivatives(problem: BAProblem, fixed=None, backend: str | None = None) -> BADerivatives:
    """Analytic gradient and Hessian; rows/cols of ``fixed`` poses are zero.

    ``fixed`` defaults to the problem's frozen mask (the gauge pose is not
    masked here; the solver handles it).
    """
    fixed = problem.frozen_mask if fixed is None else np.asarray(fixed, dtype=bool)
    return _packed_derivatives(pack(problem), problem.poses, fixed, backend)


def _packed_derivatives(pk: _Packed, poses, fixed: np.ndarray, backend=None) -> BADerivatives:
    R, t = stack_poses(poses)
    n = len(poses)
    if len(pk.feat_ids) == 0:
        return BADerivatives(np.zeros(6 * n), np.zeros((6 * n, 6 * n)), 0.0)
    st = _evaluate(pk, R, t)
    g, g1, g2, d, Q = _view_terms(pk, st)
    lam = st.lam
    coef = np.empty((len(pk.feat_ids), 3))
    gap1 = lam[:, 0] - lam[:, 1]
    gap2 = lam[:, 0] - lam[:, 2]
    degen = -gap1 < DEGENERATE_GAP
    coef[:, 0] = np.where(degen, 0.0, 2.0 / np.where(degen, -1.0, gap1))
    coef[:, 1] = np.where(degen, 0.0, 2.0 / np.where(gap2 == 0, -1.0, gap2))
    coef[:, 2] = np.where(degen, 0.0, -2.0 / pk.Nf**2)
    if degen.any():
        warnings.warn(f"{int(degen.sum())} feature(s) with degenerate smallest eigenvalue; "
                      "Hessian term dropped", RuntimeWarning)
        Q[degen[pk.view_feat]] = 0.0
    vp = np.where(fixed[pk.view_pose], -1, pk.view_pose).astype(np.int64)
    asm = kernels.assemble if backend is None else kernels.get_backend(backend)
    J, H = asm(pk.feat_ptr, vp, np.ascontiguousarray(g), np.ascontiguousarray(g1),
               np.ascontiguousarray(g2), np.ascontiguousarray(d), np.ascontiguousarray(Q),
               np.ascontiguousarray(coef), n)
    H = 0.5 * (H + H.T)
    return BADerivatives(J, H, float(lam[:, 0].sum()))


# --------------------------------------------------------------------------- #
# Levenberg-Marquardt
# --------------------------------------------------------------------------- #
@dataclass
class LMResult:
    poses: list[Pose]
    cost: float
    iterations: int
    initial_cost: float = float("nan")
    converged: bool = False

    def __iter__(self):  # (poses, cost, iterations)
        return iter((self.poses, self.cost, self.iterations))


def _retract(poses, free_idx, step):
    out = list(poses)
    for k, j in enumerate(free_idx):
        out[j] = poses[j].retract(step[6 * k:6 * k + 6])
    return out


def lm_solve(problem: BAProblem, mu0: float = 1e-4, max_iter: int = 50, tol: float = 1e-7,
             backend: str | None = None, null_tol: float | None = None) -> LMResult:
    """Levenberg-Marquardt on the unfrozen, non-gauge poses.

    With ``null_tol`` set, the step is restricted to Hessian eigendirections
    whose eigenvalue exceeds ``null_tol`` times the largest one.  Plane-only
    scenes (corridors, tunnels) leave some pose directions unobserved, and a
    plain damped step lets them wander freely.
    """
    fixed = problem.fixed_mask()
    free_idx = np.flatnonzero(~fixed)
    poses = list(problem.poses)
    pk = pack(problem)
    cost = _packed_cost(pk, poses)
    c0 = cost
    if len(free_idx) == 0:
        return LMResult(poses, cost, 0, c0, True)
    sel = (6 * free_idx[:, None] + np.arange(6)).reshape(-1)
    mu = mu0
    it = 0
    converged = False
    need = True
    while it < max_iter:
        if need:
            der = _packed_derivatives(pk, poses, fixed, backend)
            J, H = der.J[sel], der.H[np.ix_(sel, sel)]
            if null_tol is not None:
                w, V = np.linalg.eigh(H)
                keep = w > null_tol * max(w[-1], 0.0)
                w, V = w[keep], V[:, keep]
                if not keep.any():
                    raise np.linalg.LinAlgError("degenerate Hessian")
            need = False
        it += 1
        if null_tol is not None:
            step = -V @ ((V.T @ J) / (w + mu))
        else:
            while True:
                try:
                    cf = cho_factor(H + mu * np.eye(len(sel)))
                    break
                except np.linalg.LinAlgError:
                    mu *= 10.0
                    if mu > 1e8:
                        raise np.linalg.LinAlgError("degenerate Hessian")
            step = -cho_solve(cf, J)
        if np.linalg.norm(step) < tol:
            converged = True
            break
        trial = _retract(poses, free_idx, step)
        c_new = _packed_cost(pk, trial)
        if c_new < cost:
            poses, cost = trial, c_new
            mu /= 3.0
            need = True
        else:
            mu *= 3.0
            if mu > 1e8:
                raise np.linalg.LinAlgError("degenerate Hessian")
    return LMResult(poses, cost, it, c0, converged)


# --------------------------------------------------------------------------- #
# Covariance propagation
# --------------------------------------------------------------------------- #
_IU = np.triu_indices(3)


def _cluster_entry_jacobian_moments(P: np.ndarray, v: np.ndarray, N: float) -> np.ndarray:
    """``sum_k B(p_k) B(p_k)^T`` for ``B = d[P_upper, v]/dp`` from the cluster moments.

    ``B`` is affine in ``p`` (``B = B0 + sum_i p_i B_i``), so the sum only
    needs ``N``, ``v`` and ``P``.
    """
    B0 = np.zeros((9, 3))
    B0[6:, :] = np.eye(3)
    Bi = np.zeros((3, 9, 3))
    for r, (a, b) in enumerate(zip(*_IU)):
        for i in range(3):
            # d(p_a p_b)/dp_c = delta_ac p_b + delta_bc p_a; coefficient of p_i
            if a == b:
                if i == a:
                    Bi[i, r, a] += 2.0
            else:
                if i == b:
                    Bi[i, r, a] += 1.0
                if i == a:
                    Bi[i, r, b] += 1.0
    S = N * B0 @ B0.T
    for i in range(3):
        S += v[i] * (Bi[i] @ B0.T + B0 @ Bi[i].T)
        for l in range(3):
            S += P[i, l] * Bi[i] @ Bi[l].T
    return S


def _perturbed_cluster(P, v, k, h):
    P = P.copy()
    v = v.copy()
    if k < 6:
        a, b = _IU[0][k], _IU[1][k]
        P[a, b] += h
        if a != b:
            P[b, a] += h
    else:
        v[k - 6] += h
    return P, v


def cluster_sensitivities(problem: BAProblem, fixed=None, h: float = 1e-6):
    """Yield ``(feature_index, pose_index, L, S)`` for every view.

    ``L`` (6 n_poses x 9) is the central-difference derivative of the full
    gradient with respect to the view's cluster entries ``[P_upper, v]`` and
    ``S`` is ``sum_k B_k B_k^T`` for that view (multiply by ``sigma^2``).
    """
    fixed = problem.fixed_mask() if fixed is None else np.asarray(fixed, dtype=bool)
    for fi, f in enumerate(problem.features):
        for j, c in sorted(f.views.items()):
            if c.N == 0:
                continue
            L = np.zeros((6 * problem.n_poses, 9))
            for k in range(9):
                cols = []
                for sgn in (1.0, -1.0):
                    P, v = _perturbed_cluster(c.P, c.v, k, sgn * h)
                    views = dict(f.views)
                    views[j] = type(c)(P, v, c.N)
                    single = type(problem)(problem.poses, (type(f)(f.feature_id, views),),
                                           problem.frozen_mask, problem.gauge)
                    cols.append(derivatives(single, fixed).J)
                L[:, k] = (cols[0] - cols[1]) / (2 * h)
            yield fi, j, L, _cluster_entry_jacobian_moments(c.P, c.v, c.N)


def _checked_inverse(H: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(H)
    scale = max(np.abs(w).max(), 1e-300) if len(w) else 1.0
    null = int(np.sum(np.abs(w) < 1e-10 * scale))
    if null:
        raise np.linalg.LinAlgError(f"unobservable directions: null-space dimension {null}")
    return (V / w) @ V.T


def pose_covariance(problem: BAProblem, sigma: float, h: float = 1e-6) -> np.ndarray:
    """Covariance of the free-pose estimate under isotropic per-point noise ``sigma``.

    ``H^-1 (sum L Sigma_c L^T) H^-1`` with ``L`` the sensitivity of the
    gradient to each view's cluster entries (central differences) and
    ``Sigma_c`` the first-order cluster-entry covariance.
    """
    fixed = problem.fixed_mask()
    free_idx = np.flatnonzero(~fixed)
    sel = (6 * free_idx[:, None] + np.arange(6)).reshape(-1)
    if sigma == 0:
        return np.zeros((len(sel), len(sel)))
    der = derivatives(problem, fixed)
    Hinv = _checked_inverse(der.H[np.ix_(sel, sel)])
    mid = np.zeros((len(sel), len(sel)))
    for _, _, L, S in cluster_sensitivities(problem, fixed, h):
        Ls = L[sel]
        mid += sigma**2 * Ls @ S @ Ls.T
    cov = Hinv @ mid @ Hinv.T
    return 0.5 * (cov + cov.T)
