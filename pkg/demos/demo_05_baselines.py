"""Method shoot-out on one fixture: global magnitude, iterative gradient,
uniform wanda, and the coarse-to-fine pipeline, across two sparsities.

Run: python demos/demo_05_baselines.py
"""

from coarsefine import (
    ZOConfig,
    allocate_sparsity,
    compare_runs,
    evaluate,
    global_magnitude_prune,
    iterative_gradient_prune,
    sequential_prune,
    uniform_layerwise_prune,
    zo_all_scores,
)
from coarsefine.tasks import get_split, make_task, train_reference

task = make_task("two_tower_fusion", seed=0)
model = train_reference(task)
calib = get_split(task, "calib")
dense = evaluate(model, task, "val")

results = [("dense", dense)]
for p in (0.3, 0.6):
    gm, _ = global_magnitude_prune(model, p)
    results.append((f"global_magnitude@{p}", evaluate(gm, task, "val")))

    ig, _ = iterative_gradient_prune(model, calib, p)
    results.append((f"iter_gradient@{p}", evaluate(ig, task, "val")))

    uw, _, _ = uniform_layerwise_prune(model, calib, p, "wanda")
    results.append((f"uniform_wanda@{p}", evaluate(uw, task, "val")))

    scores = zo_all_scores(model, calib, ZOConfig(seed=0))
    plan = allocate_sparsity(scores, model, p, min(p + 0.1, 1.0), "block")
    cf, _, _ = sequential_prune(model, plan, calib, "wanda")
    results.append((f"coarse_to_fine@{p}", evaluate(cf, task, "val")))

rows = compare_runs(results, dense_label="dense")
print(f"{'method':24s} {'val loss':>10s} {'delta':>10s} {'sparsity':>9s}")
for row in rows:
    print(f"{row['label']:24s} {row['loss']:10.4f} {row['delta_loss']:10.4f} "
          f"{row['global_sparsity']:9.3f}")

print("\nthe adaptive plan concentrates sparsity in the redundant wide tower,")
print("so its loss grows slowest as the global sparsity rises.")
