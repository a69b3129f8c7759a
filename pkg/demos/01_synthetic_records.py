"""
Synthetic patient records and the patient-entity graph
=======================================================

Generate a rule-driven cohort, hold out each patient's last examination
and look at the bipartite graph the encoders train on.
"""

import numpy as np

from examrec import SyntheticConfig, build_hetero_graph, generate_synthetic, leave_one_out_split
from examrec.evaluation import evaluate, popularity_baseline

# 200 patients, 20 examinations; 90% of exams follow the patient's latent rule
ds, rules, active = generate_synthetic(SyntheticConfig(seed=0), return_latent=True)
v = ds.vocab
p = ds.patients[0]
print("patient", p.patient_id, p.age, p.gender)
print("  ", " ".join("%s%d" % v.local_id(e) for e in p.sequence))
print("  active rule exams:", ["C%d" % v.local_id(e)[1] for e in rules[active[0]].exams])

# the last examination of every patient becomes the test target
split = leave_one_out_split(ds)
print("test patients:", len(split.test), " dropped:", split.n_dropped)

# rows are patients, columns are entities plus age/gender nodes
g = build_hetero_graph(split.train)
print("graph", g.adjacency.shape, "edges", int(g.adjacency.sum()))
per_relation = {}
for col in np.flatnonzero(g.adjacency.sum(0)):
    rel = g.relation_of(int(col))
    per_relation[rel] = per_relation.get(rel, 0) + int(g.adjacency[:, col].sum())
for rel, n in sorted(per_relation.items()):
    print(f"  {rel:22s} {n}")

# the floor every learned model has to clear
print("popularity:", evaluate(popularity_baseline(split.train), split).summary())
