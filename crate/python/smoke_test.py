"""Builds the extension module and exercises it end to end.

    python3 python/smoke_test.py
"""
import math
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "negattn-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = os.path.join(ROOT, "target", "release", "libnegattn_py.so")
    out = tempfile.mkdtemp()
    shutil.copy(lib, os.path.join(out, "negattn.so"))
    sys.path.insert(0, out)
    return out


def close(a, b, tol=1e-12):
    return all(abs(x - y) <= tol for x, y in zip(a, b))


def main():
    tmp = build()
    import negattn

    d, heads = 8, 2
    f = negattn.gaussian(1, 6, d)
    cond = negattn.gaussian(2, 4, d)
    subj = negattn.gaussian(3, 3, d)
    w = [negattn.gaussian(s, d, d) for s in (4, 5, 6, 7)]

    z, probs = negattn.cross_attention(f, cond, *w, heads)
    assert len(z) == 6 and len(z[0]) == d
    assert len(probs) == heads and len(probs[0]) == 6 and len(probs[0][0]) == 4
    for h in probs:
        for row in h:
            assert abs(sum(row) - 1.0) < 1e-12

    ones = [1.0] * 6
    z0 = negattn.negative_attention(f, cond, subj, *w, heads, ones, 0.0)
    assert all(close(a, b) for a, b in zip(z0, z))
    z1 = negattn.negative_attention(f, cond, subj, *w, heads, [0.0] * 6, 0.8)
    assert all(close(a, b) for a, b in zip(z1, z))
    z2 = negattn.negative_attention(f, cond, subj, *w, heads, ones, 0.8)
    assert any(not close(a, b) for a, b in zip(z2, z))

    fg, bg = negattn.binarize_above_mean([0.1, 0.9, 0.5, 0.5])
    assert fg == [0.0, 1.0, 0.0, 0.0] and bg == [1.0, 0.0, 1.0, 1.0]
    assert negattn.resize_nearest([[1.0, 2.0], [3.0, 4.0]], 4, 4)[3] == [3.0, 3.0, 4.0, 4.0]

    sched = negattn.NoiseSchedule()
    assert abs(sched.alpha_bar(1) - (1 - 1e-4)) < 1e-15
    assert sched.ddim_timesteps(4) == [1000, 750, 500, 250]
    x0 = negattn.gaussian(8, 4, 4)
    eps = negattn.gaussian(9, 4, 4)
    xt = sched.forward_process(x0, 400, eps)
    back = sched.ddim_step(xt, eps, 400, 0)
    assert all(close(a, b, 1e-9) for a, b in zip(back, x0))
    ab = sched.alpha_bar(400)
    assert close(xt[0], [math.sqrt(ab) * v + math.sqrt(1 - ab) * e for v, e in zip(x0[0], eps[0])], 1e-12)

    ms = negattn.MaskState(2, 2)
    ms.begin_step(0)
    ms.record([[[0.0, 0.9], [0.0, 0.1], [0.0, 0.2], [0.0, 0.3]]], 2, 2, 1)
    ms.end_step()
    assert ms.finalize_mask() == [[0.0, 1.0], [1.0, 1.0]]
    assert ms.mask_for_resolution(4, 4)[:4] == [0.0, 0.0, 1.0, 1.0]
    ms.begin_step(1)
    assert ms.layer_mask(0, 4, 4)[:4] == [0.0, 0.0, 1.0, 1.0]

    try:
        negattn.NoiseSchedule(steps=0)
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")
    try:
        negattn.Model.load(os.path.join(tmp, "missing.ckpt"))
    except OSError:
        pass
    else:
        raise AssertionError("expected OSError")

    model = negattn.Model.untrained(3)
    path = os.path.join(tmp, "m.ckpt")
    model.save(path)
    again = negattn.Model.load(path)
    assert again.parameter_count() == model.parameter_count()
    ppm = again.generate_ppm("a photo of a sks circle on red background", seed=1,
                             subject_prompt="a sks circle", steps=3)
    assert ppm.startswith(b"P6\n32 32\n255\n") and len(ppm) == 13 + 32 * 32 * 3
    print("python smoke test ok")


if __name__ == "__main__":
    main()
