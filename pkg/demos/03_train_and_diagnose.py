# %% Training the toy network with and without the consistency losses
#
# A shortened version of the ablation: a few hundred steps on 64x64 scenes,
# then error and feature consistency under clean, training and shifted styles.
# The acceptance suite runs the full-length version over three seeds.

import time

from stereo_consistency import experiment as ex

STEPS = 120

base = ex.with_overrides(ex.ExperimentConfig(), {"train.steps": STEPS, "data.train_count": 100, "data.test_count": 20})
train_set, test_set = ex.build_corpora(base)
print(len(train_set), "training scenes,", len(test_set), "held out")

rows = []
for name in ("baseline", "W", "C+M+W"):
    cfg = ex.with_overrides(base, ex.ablation_overrides(name))
    t = time.time()
    run = ex.train(cfg, train_set)
    _, summary = ex.evaluate(run.net, test_set, cfg)
    for r in summary:
        rows.append((name, r.style_tag, r.mean_cosine, r.err_gt_3px))
    print(f"{name}: {time.time() - t:.0f}s, final loss {run.log[-1]['l_total']:.3f}")

# %% Results
# At this length the plain baseline may still sit on its constant-prediction
# plateau (cosine near 1, error near 60%); it leaves it by about 300 steps.
print(f"{'variant':<10}{'style':<8}{'cosine':>8}{'>3px %':>9}")
for name, style, cos, err in rows:
    print(f"{name:<10}{style:<8}{cos:>8.3f}{err:>9.2f}")

# %% What the whitening layers see
cfg = ex.with_overrides(base, ex.ablation_overrides("C+M+W"))
report, arrays = ex.diagnose(run.net, test_set, cfg)
for key in sorted(arrays):
    if ".mask" in key:
        print(key, "selects", int(arrays[key].sum()) // 2, "channel pairs")
