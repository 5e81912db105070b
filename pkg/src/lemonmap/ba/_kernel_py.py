"""Pure numpy Hessian/gradient assembly (reference backend)."""
import numpy as np


def assemble(feat_ptr, view_pose, g, g1, g2, d, Q, coef, n_poses):
    """Sum per-view terms into the dense gradient and Hessian.

    Views with ``view_pose < 0`` are skipped.  Within a feature the Hessian
    gets ``c1 g1 g1^T + c2 g2 g2^T + cd d d^T`` across every view pair plus
    the view's own ``Q`` block on the diagonal.
    """
    J = np.zeros((n_poses, 6))
    H = np.zeros((n_poses, 6, n_poses, 6))
    ok = view_pose >= 0
    np.add.at(J, view_pose[ok], g[ok])
    for v in np.flatnonzero(ok):
        p = view_pose[v]
        H[p, :, p, :] += Q[v]
    for f in range(len(feat_ptr) - 1):
        a, b = feat_ptr[f], feat_ptr[f + 1]
        sel = np.arange(a, b)[view_pose[a:b] >= 0]
        if len(sel) == 0:
            continue
        c1, c2, cd = coef[f]
        blk = (c1 * np.einsum("vi,wj->viwj", g1[sel], g1[sel])
               + c2 * np.einsum("vi,wj->viwj", g2[sel], g2[sel])
               + cd * np.einsum("vi,wj->viwj", d[sel], d[sel]))
        p = view_pose[sel]
        H[np.ix_(p, range(6), p, range(6))] += blk
    return J.reshape(-1), H.reshape(6 * n_poses, 6 * n_poses)
