"""Dataset ingestion and membership-evaluation-set construction.

Supports the CIFAR-10 binary batch format (3073-byte records: one label
byte, then 3x1024 channel planes R/G/B, row-major) and a seeded synthetic
generator used for fast tests.  Pixels are scaled by exactly 1/255 into
[0, 1]; no mean/std normalization anywhere.
"""

import os
from dataclasses import dataclass, field

import numpy as np

CIFAR_RECORD_BYTES = 3073
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]


class DatasetFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray        # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray        # (N,) int64
    ids: np.ndarray           # (N,) stable sample ids, unique within split
    num_classes: int
    split: str                # train | test | synthetic

    def __len__(self):
        return len(self.labels)

    def subset(self, indices):
        idx = np.asarray(indices)
        return LabeledDataset(self.images[idx], self.labels[idx],
                              self.ids[idx], self.num_classes, self.split)


@dataclass
class EvalSet:
    """Balanced member/non-member sample pools for attack evaluation."""

    members: list             # (sample_id, client_id) pairs
    non_members: list         # sample ids from the held-out split
    class_counts: dict = field(default_factory=dict)


def _parse_cifar_file(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % CIFAR_RECORD_BYTES != 0:
        offset = (len(raw) // CIFAR_RECORD_BYTES) * CIFAR_RECORD_BYTES
        raise DatasetFormatError(
            f"{path}: truncated record at byte offset {offset} "
            f"(file size {len(raw)} not a multiple of {CIFAR_RECORD_BYTES})")
    n = len(raw) // CIFAR_RECORD_BYTES
    records = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise DatasetFormatError(
            f"{path}: record {bad[0]} has label byte {labels[bad[0]]} > 9")
    images = records[:, 1:].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def _load_split(path, filenames, split, id_base=0):
    images, labels = [], []
    for name in filenames:
        full = os.path.join(path, name)
        if not os.path.exists(full):
            raise DatasetFormatError(f"missing CIFAR-10 batch file: {full}")
        imgs, labs = _parse_cifar_file(full)
        images.append(imgs)
        labels.append(labs)
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    ids = np.arange(id_base, id_base + len(labels))
    return LabeledDataset(images, labels, ids, 10, split)


def load_cifar10(path):
    """Load the standard binary batches; returns (train, test).

    Test-split sample ids are offset by 1_000_000 so member and
    non-member ids never collide.
    """
    train = _load_split(path, CIFAR_TRAIN_FILES, "train")
    test = _load_split(path, CIFAR_TEST_FILES, "test", id_base=1_000_000)
    return train, test


def write_cifar_batch(path, images, labels):
    """Write samples in the binary batch layout (test fixture helper).

    Images must already be uint8 channel planes, shape (N, 3, H, W).
    """
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        for img, lab in zip(images, labels):
            fh.write(bytes([int(lab)]))
            fh.write(img.tobytes())


def generate_synthetic(classes, per_class, dims=(3, 32, 32), seed=0,
                       noise_amp=0.25, template_strength=(1.0, 1.0),
                       stream=0, id_base=0, split="synthetic",
                       pattern_bank=32, patterns_per_sample=4):
    """Seeded synthetic dataset: per-class smooth templates plus
    per-sample high-frequency detail.

    The template gives each class coarse, low-frequency structure with
    distinct per-channel means, so a heavily downsampled image stays
    class-separable.  The fine detail is a signed combination of
    `patterns_per_sample` patterns drawn from a bank of `pattern_bank`
    checkerboard-modulated random patterns shared by every sample (and
    every stream).  Two properties matter:

    - each pattern averages to exactly zero over every aligned 2x2
      block, so a single average-pooling step removes the detail
      entirely while leaving the smooth template intact;
    - because the bank is shared, a held-out sample's combination is a
      fresh mix of familiar directions whose memorized label
      associations tend to cancel, rather than an arbitrary vector the
      model has never seen.

    `template_strength` draws a per-sample factor from the given range
    scaling the coarse signal toward the neutral 0.5 image:
    weakly-templated samples are only classifiable through their
    memorized detail, which is what opens a train/test generalization
    gap.  `stream` selects an independent draw on top of the same
    templates and pattern bank, which is how a held-out pool from the
    same distribution is produced.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    c, h, w = dims
    if c < 1 or h < 2 or w < 2:
        raise ValueError(f"invalid dims {dims}")
    if h % 2 or w % 2:
        raise ValueError(f"height and width must be even, got {dims}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 13, stream]))
    templates = class_templates(classes, dims, seed)
    bank = noise_pattern_bank(pattern_bank, dims, seed)
    n = classes * per_class
    images = np.empty((n, c, h, w), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    lo_s, hi_s = template_strength
    scale = noise_amp / np.sqrt(patterns_per_sample)
    for cls in range(classes):
        lo = cls * per_class
        for i in range(per_class):
            alpha = rng.uniform(lo_s, hi_s)
            chosen = rng.choice(pattern_bank, patterns_per_sample,
                                replace=False)
            signs = rng.choice([-1.0, 1.0], patterns_per_sample)
            noise = scale * np.einsum("p,pchw->chw",
                                      signs, bank[chosen])
            coarse = 0.5 + alpha * (templates[cls] - 0.5)
            images[lo + i] = np.clip(coarse + noise, 0.0, 1.0)
            labels[lo + i] = cls
    ids = np.arange(id_base, id_base + n)
    return LabeledDataset(images, labels, ids, classes, split)


def noise_pattern_bank(count, dims=(3, 32, 32), seed=0):
    """The shared bank of high-frequency patterns used by the generator.

    Each pattern is a random +/-1 field at half resolution, modulated by
    a [[1,-1],[-1,1]] cell so every aligned 2x2 block sums to zero.
    """
    c, h, w = dims
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    base = rng.choice([-1.0, 1.0],
                      size=(count, c, h // 2, w // 2)).astype(np.float32)
    cell = np.array([[1.0, -1.0], [-1.0, 1.0]], dtype=np.float32)
    return np.kron(base, cell)


def class_templates(classes, dims=(3, 32, 32), seed=0):
    """The smooth per-class base images the generator perturbs."""
    c, h, w = dims
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    yy = np.linspace(0, 2 * np.pi, h, dtype=np.float64)[:, None]
    xx = np.linspace(0, 2 * np.pi, w, dtype=np.float64)[None, :]
    # distinct per-channel means: base-L digits of the class index, so any
    # two classes differ by >= 0.4/(L-1) in at least one channel
    levels = max(2, int(np.ceil(classes ** (1.0 / c))))
    templates = np.empty((classes, c, h, w), dtype=np.float32)
    for cls in range(classes):
        for ch in range(c):
            digit = (cls // levels ** ch) % levels
            mean = 0.3 + 0.4 * digit / (levels - 1)
            fy, fx = rng.integers(1, 3, size=2)
            phase_y, phase_x = rng.uniform(0, 2 * np.pi, size=2)
            wave = np.cos(fy * yy + phase_y) * np.cos(fx * xx + phase_x)
            templates[cls, ch] = mean + 0.12 * wave
    return np.clip(templates, 0.0, 1.0)


def subset_per_class(dataset, per_class, seed):
    """Seeded class-balanced subset (desk-scale CIFAR-10 substitute)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 29]))
    chosen = []
    for cls in range(dataset.num_classes):
        pool = np.nonzero(dataset.labels == cls)[0]
        if len(pool) < per_class:
            raise ValueError(
                f"class {cls} has {len(pool)} samples, need {per_class}")
        chosen.extend(sorted(rng.choice(pool, per_class, replace=False)))
    return dataset.subset(chosen)


def build_eval_set(shards, test_set, members_per_client, total_nonmembers,
                   seed):
    """Client-balanced members vs held-out non-members, deterministic
    under the seed.  Member count = len(shards) * members_per_client and
    must equal total_nonmembers."""
    if members_per_client * len(shards) != total_nonmembers:
        raise ValueError(
            f"{len(shards)} clients x {members_per_client} members != "
            f"{total_nonmembers} non-members; eval set must be balanced")
    if len(test_set) < total_nonmembers:
        raise ValueError(
            f"test split has {len(test_set)} samples, need "
            f"{total_nonmembers} non-members")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    members = []
    class_counts = {"members": {}, "non_members": {}}
    for shard in shards:
        if len(shard.sample_ids) < members_per_client:
            raise ValueError(
                f"client {shard.client_id} has {len(shard.sample_ids)} "
                f"samples, need {members_per_client}")
        picks = rng.choice(len(shard.sample_ids), members_per_client,
                           replace=False)
        for i in sorted(picks):
            members.append((int(shard.sample_ids[i]), shard.client_id))
            lab = int(shard.labels[i])
            class_counts["members"][lab] = \
                class_counts["members"].get(lab, 0) + 1
    picks = rng.choice(len(test_set), total_nonmembers, replace=False)
    non_members = [int(test_set.ids[i]) for i in sorted(picks)]
    for i in sorted(picks):
        lab = int(test_set.labels[i])
        class_counts["non_members"][lab] = \
            class_counts["non_members"].get(lab, 0) + 1
    return EvalSet(members=members, non_members=non_members,
                   class_counts=class_counts)
