"""FedAvg training simulation.

All clients participate every round: broadcast the global params, run
seeded local SGD on each shard, then aggregate with shard-size weights.
One master seed deterministically derives every per-(round, client)
shuffling seed, so a whole run is reproducible bit for bit.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import nn


@dataclass(frozen=True)
class FedConfig:
    num_clients: int = 5
    rounds: int = 30
    local_epochs: int = 2
    batch_size: int = 32
    lr: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if min(self.rounds, self.local_epochs) < 0:
            raise ValueError("rounds/local_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


@dataclass
class ClientShard:
    client_id: int
    images: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray    # original dataset ids


def partition(dataset, num_clients, seed):
    """Disjoint, exhaustive, near-even shards (sizes differ by <= 1)."""
    n = len(dataset)
    if num_clients > n:
        raise ValueError(f"cannot split {n} samples across "
                         f"{num_clients} clients")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    order = rng.permutation(n)
    shards = []
    for cid, idx in enumerate(np.array_split(order, num_clients)):
        shards.append(ClientShard(client_id=cid,
                                  images=dataset.images[idx],
                                  labels=dataset.labels[idx],
                                  sample_ids=dataset.ids[idx]))
    return shards


def shuffle_seed(master_seed, round_idx, client_id):
    """Stable sub-seed for one client's local pass in one round."""
    return np.random.SeedSequence([master_seed, round_idx, client_id])


def local_train(global_params, arch, shard, cfg: FedConfig, round_idx=0):
    """local_epochs of seeded mini-batch SGD from the broadcast params."""
    if len(shard.labels) == 0:
        raise ValueError(f"client {shard.client_id} has an empty shard")
    rng = np.random.default_rng(
        shuffle_seed(cfg.seed, round_idx, shard.client_id))
    params = global_params
    losses = []
    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(shard.labels))
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss, grads = nn.loss_and_gradients(
                params, arch, shard.images[idx], shard.labels[idx])
            params = nn.sgd_step(params, grads, cfg.lr)
            losses.append(loss)
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return params, mean_loss


def fedavg_aggregate(client_params, client_sizes):
    """Elementwise weighted mean of parameter blocks, weights = sizes."""
    if not client_params or len(client_params) != len(client_sizes):
        raise ValueError("need matching nonempty params/sizes lists")
    total = float(sum(client_sizes))
    if total <= 0:
        raise ValueError("total client size must be positive")
    out = []
    for i, ref in enumerate(client_params[0]):
        if ref is None:
            out.append(None)
            continue
        acc_w = np.zeros(ref["W"].shape, dtype=np.float64)
        acc_b = np.zeros(ref["b"].shape, dtype=np.float64)
        for params, size in zip(client_params, client_sizes):
            p = params[i]
            if p["W"].shape != ref["W"].shape:
                raise nn.ShapeMismatchError(
                    f"layer {i} shape mismatch across clients")
            acc_w += (size / total) * p["W"]
            acc_b += (size / total) * p["b"]
        out.append({"W": acc_w.astype(ref["W"].dtype),
                    "b": acc_b.astype(ref["b"].dtype)})
    return out


def _accuracy(params, arch, images, labels, batch=256):
    hits = 0
    for lo in range(0, len(labels), batch):
        logits = nn.forward_batch(params, arch, images[lo:lo + batch])
        hits += int((logits.argmax(axis=1) == labels[lo:lo + batch]).sum())
    return hits / len(labels)


def run_federated_training(dataset, arch, cfg: FedConfig, test_set=None,
                           workers=1):
    """Full FedAvg loop; returns (global params, per-round log rows).

    Log rows: dicts with round, train_acc, test_acc, mean_client_loss.
    Client training fans out across threads when workers > 1; numerics
    are identical for any worker count because clients are independent.
    """
    shards = partition(dataset, cfg.num_clients, cfg.seed)
    sizes = [len(s.labels) for s in shards]
    params = nn.init_params(arch, cfg.seed)
    log = []
    for rnd in range(cfg.rounds):
        def fit(shard, rnd=rnd, params=params):
            return local_train(params, arch, shard, cfg, round_idx=rnd)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(fit, shards))
        else:
            results = [fit(shard) for shard in shards]
        params = fedavg_aggregate([r[0] for r in results], sizes)
        row = {
            "round": rnd + 1,
            "train_acc": _accuracy(params, arch, dataset.images,
                                   dataset.labels),
            "test_acc": (_accuracy(params, arch, test_set.images,
                                   test_set.labels)
                         if test_set is not None else float("nan")),
            "mean_client_loss": float(np.mean([r[1] for r in results])),
        }
        log.append(row)
    return params, log
