import os
for v in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(v, "1")
import sys
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "tests"))
import numpy as np
from test_acceptance import _full_pipeline_fd_setup


def analytic_grads(build, arrays):
    import msn.tensor as T
    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(leaves)
    loss.backward()
    return [lf.grad.copy() for lf in leaves], float(loss.data)


def fd_grad_coord(build, arrays, pi, idx, step):
    plus = [a.copy() for a in arrays]
    minus = [a.copy() for a in arrays]
    plus[pi][idx] += step
    minus[pi][idx] -= step
    import msn.tensor as T
    fp = float(build([T.Tensor(a) for a in plus]).data)
    fm = float(build([T.Tensor(a) for a in minus]).data)
    return (fp - fm) / (2.0 * step)


def main():
    build, arrays, names = _full_pipeline_fd_setup()
    grads, loss0 = analytic_grads(build, arrays)
    print(f"loss at base point: {loss0:.6f}")

    # full FD at 1e-5 per param, track worst coords
    worst = []
    for pi, (a, g, nm) in enumerate(zip(arrays, grads, names)):
        errs = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            num = fd_grad_coord(build, arrays, pi, idx, 1e-5)
            den = max(abs(g[idx]), abs(num), 1e-8)
            errs[idx] = abs(g[idx] - num) / den
            it.iternext()
        mx = errs.max()
        mxi = np.unravel_index(errs.argmax(), errs.shape)
        worst.append((mx, pi, mxi, nm))
        flag = " <-- OVER" if mx > 1e-4 else ""
        print(f"{nm:40s} max rel err {mx:.3e} at {mxi}{flag}")

    worst.sort(reverse=True)
    print("\n== top 8 offenders: step study ==")
    for mx, pi, idx, nm in worst[:8]:
        g = grads[pi][idx]
        row = [f"{nm}{idx}: analytic {g:+.9e}"]
        for step in (1e-4, 1e-5, 1e-6, 1e-7):
            num = fd_grad_coord(build, arrays, pi, idx, step)
            den = max(abs(g), abs(num), 1e-8)
            row.append(f"h={step:g}: num {num:+.9e} rel {abs(g-num)/den:.2e}")
        print("\n  ".join(row))


if __name__ == "__main__":
    main()
