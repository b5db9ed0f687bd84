"""Time each hot kernel under the numba and numpy backends.

    python benchmarks/bench_kernels.py [--repeat 5] [--frames 40]

Inputs come from one simulator scene so the sizes match real use. Numba
compilation happens in a warm-up call that is not timed. Prints one line per
kernel with the best-of-N time for each backend and the speedup.
"""

import argparse
import time

import numpy as np

from handworld import _kernels, sim
from handworld.ba import BAProblem, _kernel_args, triangulate_inverse_depths
from handworld.hand import HAND_PARENTS, bone_segments
from handworld.scale import gather_samples


def best_time(fn, repeat):
    fn()  # warm-up (and JIT compile for numba)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def make_cases(frames):
    b = sim.generate(sim.SceneSpec(seed=0, frames=frames))
    K = b.intrinsics
    rho = triangulate_inverse_depths(b.tracks, K, b.init_cams)
    prob = BAProblem(b.tracks, K, b.init_cams, rho)
    args = _kernel_args(prob, b.init_cams.R, b.init_cams.t, rho)
    d, D = gather_samples(b.depth_frames, None)
    d = np.ascontiguousarray(np.tile(d, 20))
    D = np.ascontiguousarray(np.tile(D, 20))
    joints = b.gt_hand_camera.joints(b.template)
    vis = np.flatnonzero(b.visible)
    pts = np.ascontiguousarray(joints[vis[0], :, :2] / joints[vis[0], :, 2:] * K.fx + [K.cx, K.cy])
    segs = np.ascontiguousarray(np.concatenate([np.stack([np.arange(21)] * 2, axis=1),
                                                bone_segments(HAND_PARENTS)]), dtype=np.int64)
    intr = (K.fx, K.fy, K.cx, K.cy)
    return {
        "ba_residuals": lambda kern: kern(*args, *intr),
        "ba_normal_eq": lambda kern: kern(*args, np.ascontiguousarray(prob.obs_w), *intr, len(prob.tracks)),
        "gm_irls_sums": lambda kern: kern(d, D, 1.5, 0.05),
        "raster_capsules": lambda kern: kern(K.height, K.width, pts, segs, 8.0),
    }, {"observations": prob.obs_frame.size, "depth samples": d.size}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--frames", type=int, default=40)
    args = p.parse_args(argv)

    cases, sizes = make_cases(args.frames)
    print("sizes: " + ", ".join(f"{k} {v}" for k, v in sizes.items()))
    print(f"{'kernel':<18}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for name, call in cases.items():
        t_np = best_time(lambda: call(_kernels.get(name, "numpy")), args.repeat)
        t_nb = best_time(lambda: call(_kernels.get(name, "numba")), args.repeat)
        print(f"{name:<18}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>10.1f}")


if __name__ == "__main__":
    main()
