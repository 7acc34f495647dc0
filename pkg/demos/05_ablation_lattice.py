"""A reduced run of the six-sub-method ablation.

A = detection branch alone, B = semantic branch alone, C/D add a
non-interactive contrastive term to a single branch, E runs both branches
with independent contrast, F is the full interactive method. The full-size
protocol (200/50 scenes, 5 seeds, medians) lives behind
`weakdet ablate`; this demo shrinks it to stay quick.
"""

import statistics
import time
from dataclasses import replace

from weakdet.datamodel import SceneConfig, generate_dataset
from weakdet.evalmetrics import corloc, mean_ap
from weakdet.trainer import SUB_METHODS, TrainConfig, infer, train

N_SEEDS = 2
bags, gts = generate_dataset(SceneConfig(seed=0), 100)
train_bags, train_gts = bags[:80], gts[:80]
test_bags, test_gts = bags[80:], gts[80:]
base = TrainConfig(epochs=6)

print(f"{len(train_bags)} train / {len(test_bags)} test scenes, "
      f"{N_SEEDS} seeds per sub-method, {base.epochs} epochs\n")
print("sub-method        modules      mAP@0.5   CorLoc   time")
t0 = time.time()
results = {}
for name in sorted(SUB_METHODS):
    mask = SUB_METHODS[name]
    maps, cors = [], []
    for s in range(N_SEEDS):
        cfg = replace(base, modules=mask, seed=s)
        state, _ = train(train_bags, cfg)
        maps.append(mean_ap([d for b in test_bags for d in infer(b, state, cfg)], test_gts, 6, 0.5))
        cors.append(corloc([d for b in train_bags for d in infer(b, state, cfg)], train_gts, 6))
    results[name] = (statistics.median(maps), statistics.median(cors))
    print(f"{name:<14} {'+'.join(sorted(mask)):<14} {results[name][0]:>7.4f}  {results[name][1]:>7.4f}"
          f"   {time.time() - t0:>5.1f}s")

print()
f_map, a_map, e_map = results["F"][0], results["A"][0], results["E"][0]
print(f"full method vs detection branch alone: {f_map - a_map:+.4f} mAP")
print(f"interactive vs independent contrast  : {f_map - e_map:+.4f} mAP")
