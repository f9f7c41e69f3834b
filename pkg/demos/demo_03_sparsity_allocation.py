"""From scores to sparsity ratios: the proportional split, the per-layer
cap, and the layer-collapse failure mode the cap prevents.

Run: python demos/demo_03_sparsity_allocation.py
"""

import numpy as np

from coarsefine import ScoreMap, allocate_sparsity, validate_plan
from coarsefine.model import Block, LayerSpec, ModelGraph


def show(plan, label):
    print(f"\n{label}")
    for name, a in plan.per_layer.items():
        bar = "#" * int(30 * (1 - a.sparsity))
        print(f"  {name:8s} keep {a.keep_count:4d}/{a.size:4d}  p_i={a.sparsity:.3f} {bar}")


model = ModelGraph(
    blocks=[Block("net", [
        LayerSpec("small", "linear", np.ones((100, 1))),
        LayerSpec("large", "linear", np.ones((3, 100))),
    ])],
    head="mse",
)

# a 3:1 score ratio on equal-size layers splits the keep budget 75/25
pair = ModelGraph(
    blocks=[Block("net", [
        LayerSpec("hot", "linear", np.ones((100, 1))),
        LayerSpec("cold", "linear", np.ones((1, 100))),
    ])],
    head="mse",
)
scores = ScoreMap(entries={"hot": 3.0, "cold": 1.0}, method="magnitude")
show(allocate_sparsity(scores, pair, target_p=0.5, p_max=1.0), "3:1 scores, no cap")
show(allocate_sparsity(scores, pair, target_p=0.5, p_max=0.6),
     "3:1 scores, p_max=0.6 (pre-picked keeps pull both toward the cap)")

# layer collapse: with an extreme score skew and no cap, one layer loses
# every weight; the cap guarantees a floor
skew = ScoreMap(entries={"hot": 1e9, "cold": 1e-9}, method="magnitude")
show(allocate_sparsity(skew, pair, 0.5, 1.0), "extreme skew, p_max=1 (collapse!)")
show(allocate_sparsity(skew, pair, 0.5, 0.6), "extreme skew, p_max=p+0.1 (no collapse)")

plan = allocate_sparsity(skew, pair, 0.5, 0.6)
print("\nvalidate_plan:", validate_plan(plan, pair) or "ok")
print("keep total == round((1-p)*|W|):", plan.keep_total(), "== 100")
