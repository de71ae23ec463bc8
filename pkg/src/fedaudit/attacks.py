"""Training-free membership attacks over the black-box query facade.

Three scores, all oriented "higher = more member-like":

* resmia   — average per-step drop of the predicted-class confidence
             under progressive resolution erosion (K+1 queries)
* loss     — max class probability on the original image (1 query)
* entropy  — negated Shannon entropy of the output distribution (1 query)

No gradients and no parameter access anywhere: everything goes through
``model.query``.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .tensors import ErosionConfig, erosion_sequence

ATTACK_NAMES = ("resmia", "loss", "entropy")

SCORES_CSV_COLUMNS = ("sample_id", "client_id", "is_member", "score_resmia",
                      "score_loss", "score_entropy", "queries_resmia")


@dataclass
class ConfidenceTrace:
    """Model responses along one image's erosion path.

    target_probs[k] is the probability of the class predicted on the
    original image, evaluated on the k-th erosion iterate; max_probs[k]
    is the top-1 confidence at that iterate (kept for diagnostics, since
    erosion may flip the argmax).
    """

    predicted_class: int
    target_probs: np.ndarray   # float64, length K+1
    max_probs: np.ndarray      # float64, length K+1
    initial_probs: np.ndarray  # full probability vector on the original


def confidence_trace(model, img, cfg: ErosionConfig) -> ConfidenceTrace:
    """Query the model on every erosion iterate: exactly K+1 queries.

    The predicted class is the argmax on the original image, ties broken
    toward the lowest class index (numpy argmax convention).
    """
    target = []
    top = []
    y_star = None
    p0 = None
    for x in erosion_sequence(img, cfg):
        p = np.asarray(model.query(x), dtype=np.float64)
        if y_star is None:
            y_star = int(p.argmax())
            p0 = p
        target.append(p[y_star])
        top.append(p.max())
    return ConfidenceTrace(predicted_class=y_star,
                           target_probs=np.array(target),
                           max_probs=np.array(top),
                           initial_probs=p0)


def resmia_score(trace: ConfidenceTrace) -> float:
    """Average confidence drop per erosion step (sum form).

    May be negative when erosion raises the confidence; scores are not
    clamped.
    """
    p = trace.target_probs
    k = len(p) - 1
    if k < 1:
        raise ValueError("confidence decay needs at least one erosion step")
    return float(np.sum(p[:-1] - p[1:]) / k)


def resmia_score_closed(trace: ConfidenceTrace) -> float:
    """Telescoped form: (first - last) / K.  Equal to the sum form."""
    p = trace.target_probs
    k = len(p) - 1
    if k < 1:
        raise ValueError("confidence decay needs at least one erosion step")
    return float((p[0] - p[-1]) / k)


def loss_attack_score(model, img) -> float:
    """Top-1 confidence on the unmodified image; one query."""
    p = np.asarray(model.query(img), dtype=np.float64)
    return float(p.max())


def negated_entropy(probs) -> float:
    """-H(p) with 0*ln(0) := 0, so a one-hot output scores 0 (maximal)."""
    p = np.asarray(probs, dtype=np.float64)
    terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(terms.sum())


def entropy_attack_score(model, img) -> float:
    """Negated output entropy; one query."""
    return negated_entropy(model.query(img))


@dataclass
class EvalSample:
    sample_id: int
    client_id: object          # int for members, "nonmember" otherwise
    is_member: bool
    image: np.ndarray


@dataclass
class AttackRecord:
    sample_id: int
    client_id: object
    is_member: bool
    scores: dict = field(default_factory=dict)
    queries_resmia: int = 0


def gather_eval_samples(eval_set, train_set, test_set):
    """Materialize EvalSamples (with images) from an EvalSet's id lists."""
    train_pos = {int(i): k for k, i in enumerate(train_set.ids)}
    test_pos = {int(i): k for k, i in enumerate(test_set.ids)}
    samples = []
    for sid, cid in eval_set.members:
        samples.append(EvalSample(sid, cid, True,
                                  train_set.images[train_pos[sid]]))
    for sid in eval_set.non_members:
        samples.append(EvalSample(sid, "nonmember", False,
                                  test_set.images[test_pos[sid]]))
    return samples


def _score_sample(model, sample, cfg):
    trace = confidence_trace(model, sample.image, cfg)
    # the x0 response is shared: both baselines are functions of the same
    # probability vector the trace already paid one query for
    scores = {
        "resmia": resmia_score(trace),
        "loss": float(trace.initial_probs.max()),
        "entropy": negated_entropy(trace.initial_probs),
    }
    return AttackRecord(sample_id=sample.sample_id,
                        client_id=sample.client_id,
                        is_member=sample.is_member,
                        scores=scores,
                        queries_resmia=cfg.steps + 1)


def evaluate_attacks(model, samples, cfg: ErosionConfig, workers=1):
    """Score every eval sample with all three attacks.

    Records come back ordered by (is_member desc, sample_id) regardless
    of worker count; scoring is a pure function of the model outputs, so
    parallel execution changes nothing numerically.
    """
    members = sum(1 for s in samples if s.is_member)
    if members == 0 or members == len(samples):
        raise ValueError("eval set needs both members and non-members")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(
                lambda s: _score_sample(model, s, cfg), samples))
    else:
        records = [_score_sample(model, s, cfg) for s in samples]
    records.sort(key=lambda r: (not r.is_member, r.sample_id))
    return records


def write_scores_csv(path, records, metadata=None):
    """Dump records with a `# key=value` metadata preamble.

    Floats are written with repr so reruns are byte-identical.
    """
    with open(path, "w", newline="") as fh:
        for key in sorted(metadata or {}):
            fh.write(f"# {key}={metadata[key]}\n")
        writer = csv.writer(fh)
        writer.writerow(SCORES_CSV_COLUMNS)
        for r in records:
            writer.writerow([
                r.sample_id, r.client_id, int(r.is_member),
                repr(r.scores["resmia"]), repr(r.scores["loss"]),
                repr(r.scores["entropy"]), r.queries_resmia,
            ])


def read_scores_csv(path):
    """Inverse of write_scores_csv; returns (records, metadata)."""
    metadata = {}
    records = []
    with open(path, newline="") as fh:
        rows = []
        for line in fh:
            if line.startswith("# "):
                key, _, value = line[2:].rstrip("\n").partition("=")
                metadata[key] = value
            else:
                rows.append(line)
        for row in csv.DictReader(rows):
            cid = row["client_id"]
            records.append(AttackRecord(
                sample_id=int(row["sample_id"]),
                client_id=cid if cid == "nonmember" else int(cid),
                is_member=bool(int(row["is_member"])),
                scores={"resmia": float(row["score_resmia"]),
                        "loss": float(row["score_loss"]),
                        "entropy": float(row["score_entropy"])},
                queries_resmia=int(row["queries_resmia"])))
    return records, metadata
