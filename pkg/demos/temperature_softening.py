"""How temperature flattens a grader's synergic labels.

Prints mean max probability and mean variance of the labels a dr-like
grader puts on amd-like images as T grows.
"""

from sall import network as net
from sall import pipeline as pl
from sall import synthetic as syn

(dr, dr_ov), (amd, amd_ov) = syn.benchmark_tasks(("dr", "amd"))
dr_data = syn.generate_dataset(dr, dr_ov, [60] * dr.K, 32, seed=1)
amd_data = syn.generate_dataset(amd, amd_ov, [60] * amd.K, 32, seed=1)

spec = net.default_spec([("dr", dr.K)], input_shape=(3, 32, 32))
grader = pl.pretrain_single(dr_data, spec, pl.TrainConfig(epochs=20)).params

print(" T     mean max   mean variance")
for T in (1, 2, 3, 5, 10, 20, 50):
    s = pl.label_stats(pl.generate_synergic_labels(grader, spec, "dr", amd_data, T, attach=False))
    print(f"{T:3d}   {s.mean_max:.4f}     {s.mean_variance:.5f}")
print(f"uniform over {dr.K} grades: mean max {1 / dr.K:.4f}, variance 0")
