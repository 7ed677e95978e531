"""Task samplers: sinusoid regression and synthetic cluster classification.

All randomness is derived from a root seed through splittable substreams, so
task i of a stream is a pure function of (seed, domain, i). Changing how many
training tasks are drawn can never perturb evaluation or probe tasks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

# Substream domains.
TRAIN = 0
EVAL = 1
PROBE = 2

_MAX_PROTO_ATTEMPTS = 10_000


@dataclass
class Task:
    """One few-shot problem: support/query split plus generating metadata."""

    kind: str  # "regression" | "classification"
    support_x: Tensor
    support_y: Tensor
    query_x: Tensor
    query_y: Tensor
    metadata: dict = field(default_factory=dict)

    @property
    def k_shot(self):
        n = self.support_x.data.shape[0]
        ways = self.metadata.get("n_way", 1)
        return n // ways


def substream(seed, domain, index):
    """Independent generator for one draw of one stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(domain), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


def sample_sine_task(rng, k_shot, query_size):
    """Random sinusoid task: y = A sin(x + b) with A ~ U[0.1, 5], b ~ U[0, pi],
    inputs uniform on [-5, 5]. Support and query are independent draws."""
    k_shot = int(k_shot)
    query_size = int(query_size)
    if k_shot < 1:
        raise ValueError("k_shot must be >= 1")
    if query_size < 1:
        raise ValueError("query_size must be >= 1")
    amplitude = rng.uniform(0.1, 5.0)
    phase = rng.uniform(0.0, np.pi)
    sx = rng.uniform(-5.0, 5.0, size=(k_shot, 1))
    qx = rng.uniform(-5.0, 5.0, size=(query_size, 1))
    return Task(
        kind="regression",
        support_x=Tensor(sx),
        support_y=Tensor(amplitude * np.sin(sx + phase)),
        query_x=Tensor(qx),
        query_y=Tensor(amplitude * np.sin(qx + phase)),
        metadata={"amplitude": float(amplitude), "phase": float(phase)},
    )


def sample_sine_test_task(rng, k_shot, grid_points=100):
    """Sinusoid task whose query is a dense grid on [-5, 5], which makes the
    post-adaptation MSE well defined and comparable across methods."""
    k_shot = int(k_shot)
    if k_shot < 1:
        raise ValueError("k_shot must be >= 1")
    amplitude = rng.uniform(0.1, 5.0)
    phase = rng.uniform(0.0, np.pi)
    sx = rng.uniform(-5.0, 5.0, size=(k_shot, 1))
    qx = np.linspace(-5.0, 5.0, int(grid_points)).reshape(-1, 1)
    return Task(
        kind="regression",
        support_x=Tensor(sx),
        support_y=Tensor(amplitude * np.sin(sx + phase)),
        query_x=Tensor(qx),
        query_y=Tensor(amplitude * np.sin(qx + phase)),
        metadata={"amplitude": float(amplitude), "phase": float(phase)},
    )


def sample_cluster_task(rng, n_way=5, k_shot=1, query_per_class=15, dim=20, spread=0.3):
    """N-way K-shot classification from Gaussian clusters.

    Per task: ``n_way`` prototypes uniform on [-1, 1]^dim at pairwise distance
    >= 2*spread (rejection sampled), samples drawn around them with isotropic
    std ``spread``, and class labels permuted per task so class identity is
    task-local.
    """
    n_way = int(n_way)
    k_shot = int(k_shot)
    query_per_class = int(query_per_class)
    dim = int(dim)
    spread = float(spread)
    if n_way < 2:
        raise ValueError("n_way must be >= 2")
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if k_shot < 1 or query_per_class < 1:
        raise ValueError("k_shot and query_per_class must be >= 1")
    if spread <= 0:
        raise ValueError("spread must be positive")

    protos = np.empty((n_way, dim))
    have = 0
    attempts = 0
    while have < n_way:
        attempts += 1
        if attempts > _MAX_PROTO_ATTEMPTS:
            raise RuntimeError(
                f"prototype rejection sampling exceeded {_MAX_PROTO_ATTEMPTS} attempts "
                f"(spread {spread} too large for dim {dim})")
        cand = rng.uniform(-1.0, 1.0, size=dim)
        if have and np.min(np.linalg.norm(protos[:have] - cand, axis=1)) < 2.0 * spread:
            continue
        protos[have] = cand
        have += 1

    perm = rng.permutation(n_way)
    sx = np.empty((n_way * k_shot, dim))
    sy = np.empty(n_way * k_shot)
    qx = np.empty((n_way * query_per_class, dim))
    qy = np.empty(n_way * query_per_class)
    for j in range(n_way):
        sx[j * k_shot:(j + 1) * k_shot] = protos[j] + spread * rng.standard_normal((k_shot, dim))
        sy[j * k_shot:(j + 1) * k_shot] = perm[j]
        rows = slice(j * query_per_class, (j + 1) * query_per_class)
        qx[rows] = protos[j] + spread * rng.standard_normal((query_per_class, dim))
        qy[rows] = perm[j]
    return Task(
        kind="classification",
        support_x=Tensor(sx),
        support_y=Tensor(sy),
        query_x=Tensor(qx),
        query_y=Tensor(qy),
        metadata={
            "n_way": n_way,
            "prototypes": protos,
            "label_permutation": perm,
            "spread": spread,
        },
    )


def dump_tasks(tasks, path):
    """One JSON record per task (kind, metadata, flattened arrays), for
    cross-implementation comparison fixtures."""
    def clean(v):
        if isinstance(v, np.ndarray):
            return v.reshape(-1).tolist()
        if isinstance(v, (np.integer, np.floating)):
            return v.item()
        return v

    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            rec = {
                "kind": t.kind,
                "metadata": {k: clean(v) for k, v in t.metadata.items()},
                "support_x": t.support_x.values.tolist(),
                "support_y": t.support_y.values.tolist(),
                "query_x": t.query_x.values.tolist(),
                "query_y": t.query_y.values.tolist(),
                "support_shape": list(t.support_x.shape),
                "query_shape": list(t.query_x.shape),
            }
            fh.write(json.dumps(rec) + "\n")
