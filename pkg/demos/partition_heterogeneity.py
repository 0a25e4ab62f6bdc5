"""
How skewed are the client shards?
=================================

Split one synthetic dataset three ways and look at the label mix each
client ends up with. The mean total variation distance to the global
label distribution summarizes the skew.
"""

from fedbat.datasets import PartitionSpec, partition, partition_stats, synth_blobs

data = synth_blobs(6000, 16, 10, 1.0, seed=0)

for spec in [
    PartitionSpec("iid", n_clients=20),
    PartitionSpec("dirichlet", n_clients=20, beta=0.3),
    PartitionSpec("dirichlet", n_clients=20, beta=100.0),
    PartitionSpec("label-shard", n_clients=20, labels_per_client=2),
]:
    stats = partition_stats(partition(data, spec), data)
    labels_held = (stats.label_counts > 0).sum(axis=1)
    name = f"dirichlet({spec.beta:g})" if spec.scheme == "dirichlet" else spec.scheme
    print(f"{name:>15}  mean TV {stats.mean_tv:.3f}  "
          f"sizes {stats.sizes.min()}..{stats.sizes.max()}  labels/client {labels_held.min()}..{labels_held.max()}")

# the full table for one split, as the partition command prints it
print(partition_stats(partition(data, PartitionSpec("label-shard", 10, labels_per_client=2)), data).to_csv())
