"""Two-headed MLP: shared feature extractor, meta head, co head.

The parameter set is partitioned three ways. The feature extractor (``fe``)
produces post-activation features. The meta head (``meta``) is the head that
adapts per task and serves predictions at test time. The co head (``co``)
reads the same features and is only ever touched by the outer optimization
loop; at test time it can be dropped entirely.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add_bias, as_tensor, matmul, relu

FE = "fe"
META = "meta"
CO = "co"
PARTITIONS = (FE, META, CO)

_MAGIC = b"MCP1"


@dataclass(frozen=True)
class MlpSpec:
    """Architecture description shared by all method variants."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    co_hidden_dims: tuple[int, ...] = (40,)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        object.__setattr__(self, "co_hidden_dims", tuple(int(d) for d in self.co_hidden_dims))
        dims = (self.input_dim, self.output_dim) + self.hidden_dims + self.co_hidden_dims
        if any(d < 1 for d in dims):
            raise ValueError(f"all dimensions must be >= 1, got {dims}")
        if not self.hidden_dims:
            raise ValueError("need at least one hidden layer to produce features")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def feature_dim(self):
        # The co head consumes the last hidden layer's features, so its input
        # width is pinned to this.
        return self.hidden_dims[-1]


class ParamSet:
    """Ordered, named, partitioned parameter collection.

    Immutable by convention: updates go through :meth:`replace`, which
    returns a new ParamSet. Iteration order is insertion order and therefore
    deterministic.
    """

    def __init__(self, entries, tags):
        self._names = []
        self._values = {}
        self._tags = {}
        for name, value in entries:
            if name in self._values:
                raise ValueError(f"duplicate parameter name {name!r}")
            tag = tags[name]
            if tag not in PARTITIONS:
                raise ValueError(f"unknown partition tag {tag!r} for {name!r}")
            arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
            self._names.append(name)
            self._values[name] = np.ascontiguousarray(arr, dtype=np.float64)
            self._tags[name] = tag

    @property
    def names(self):
        return tuple(self._names)

    def tag(self, name):
        return self._tags[name]

    def partition(self, tag):
        """Names belonging to one partition, in parameter order."""
        return tuple(n for n in self._names if self._tags[n] == tag)

    def array(self, name):
        return self._values[name]

    def tensor(self, name):
        return Tensor(self._values[name])

    def __contains__(self, name):
        return name in self._values

    def items(self):
        return [(n, self._values[n]) for n in self._names]

    def bind(self, graph):
        """Lift every entry onto ``graph`` as differentiation leaves."""
        return {n: graph.leaf(self._values[n]) for n in self._names}

    def replace(self, updates):
        """New ParamSet with some arrays replaced; names and tags unchanged."""
        entries = []
        for n in self._names:
            v = updates.get(n, self._values[n])
            entries.append((n, v))
        return ParamSet(entries, dict(self._tags))

    def drop(self, tag):
        """New ParamSet without one partition (e.g. shipping without the co head)."""
        entries = [(n, self._values[n]) for n in self._names if self._tags[n] != tag]
        tags = {n: t for n, t in self._tags.items() if t != tag}
        return ParamSet(entries, tags)

    def num_params(self, tag=None):
        names = self._names if tag is None else self.partition(tag)
        return int(sum(self._values[n].size for n in names))

    def state_bytes(self):
        return b"".join(self._values[n].tobytes() for n in self._names)

    def allclose(self, other, rtol=0.0, atol=0.0):
        if self.names != other.names:
            return False
        return all(
            np.allclose(self._values[n], other.array(n), rtol=rtol, atol=atol)
            for n in self._names
        )

    def equal(self, other):
        """Bitwise equality of names, tags and values."""
        if self.names != other.names:
            return False
        if any(self._tags[n] != other.tag(n) for n in self._names):
            return False
        return all(
            self._values[n].tobytes() == other.array(n).tobytes() for n in self._names
        )

    # -- flat binary checkpoint format ------------------------------------
    # header: magic, entry count, then per entry (name, tag, shape);
    # payload: contiguous little-endian float64 values in entry order.

    _TAG_CODE = {FE: 0, META: 1, CO: 2}
    _CODE_TAG = {0: FE, 1: META, 2: CO}

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", len(self._names)))
            for n in self._names:
                raw = n.encode("utf-8")
                arr = self._values[n]
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<BB", self._TAG_CODE[self._tags[n]], arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            for n in self._names:
                fh.write(self._values[n].astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            if fh.read(4) != _MAGIC:
                raise ValueError(f"{path}: not a parameter checkpoint")
            (count,) = struct.unpack("<I", fh.read(4))
            headers = []
            for _ in range(count):
                (name_len,) = struct.unpack("<H", fh.read(2))
                name = fh.read(name_len).decode("utf-8")
                tag_code, ndim = struct.unpack("<BB", fh.read(2))
                shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
                headers.append((name, cls._CODE_TAG[tag_code], shape))
            entries = []
            tags = {}
            for name, tag, shape in headers:
                n_vals = int(np.prod(shape)) if shape else 1
                buf = fh.read(8 * n_vals)
                if len(buf) != 8 * n_vals:
                    raise ValueError(f"{path}: truncated payload for {name!r}")
                arr = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
                entries.append((name, arr))
                tags[name] = tag
            if fh.read(1):
                raise ValueError(f"{path}: trailing bytes after payload")
        return cls(entries, tags)


@dataclass
class Mlp:
    """Forward passes over a ParamSet-like mapping of name -> Tensor."""

    spec: MlpSpec
    co_forward_count: int = field(default=0, compare=False)

    def fe_layer_names(self):
        return tuple(f"fe.{i}" for i in range(len(self.spec.hidden_dims)))

    def co_layer_names(self):
        return tuple(f"co.{i}" for i in range(len(self.spec.co_hidden_dims) + 1))

    def init_params(self, seed):
        """Uniform weights on +/- sqrt(6 / (fan_in + fan_out)), zero biases."""
        rng = np.random.default_rng(int(seed))
        entries = []
        tags = {}

        def layer(name, tag, fan_in, fan_out):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            entries.append((f"{name}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out))))
            entries.append((f"{name}.b", np.zeros(fan_out)))
            tags[f"{name}.w"] = tag
            tags[f"{name}.b"] = tag

        prev = self.spec.input_dim
        for i, width in enumerate(self.spec.hidden_dims):
            layer(f"fe.{i}", FE, prev, width)
            prev = width
        layer("head", META, prev, self.spec.output_dim)
        prev = self.spec.feature_dim
        for i, width in enumerate(self.spec.co_hidden_dims):
            layer(f"co.{i}", CO, prev, width)
            prev = width
        layer(f"co.{len(self.spec.co_hidden_dims)}", CO, prev, self.spec.output_dim)
        return ParamSet(entries, tags)

    def features(self, params, x):
        """Post-activation output of the last feature-extractor layer."""
        h = as_tensor(x)
        if h.data.ndim != 2 or h.data.shape[1] != self.spec.input_dim:
            raise ValueError(
                f"expected input of shape (batch, {self.spec.input_dim}), got {h.data.shape}")
        for i in range(len(self.spec.hidden_dims)):
            h = relu(add_bias(matmul(h, params[f"fe.{i}.w"]), params[f"fe.{i}.b"]))
        return h

    def forward_meta(self, params, x):
        """Returns (features, meta-head output)."""
        feats = self.features(params, x)
        out = add_bias(matmul(feats, params["head.w"]), params["head.b"])
        return feats, out

    def forward_co(self, params, features):
        """Co-head output for precomputed features. Counts invocations so
        tests can assert the co path stays cold where it must."""
        self.co_forward_count += 1
        h = as_tensor(features)
        if h.data.ndim != 2 or h.data.shape[1] != self.spec.feature_dim:
            raise ValueError(
                f"expected features of shape (batch, {self.spec.feature_dim}), got {h.data.shape}")
        n_hidden = len(self.spec.co_hidden_dims)
        for i in range(n_hidden):
            h = relu(add_bias(matmul(h, params[f"co.{i}.w"]), params[f"co.{i}.b"]))
        return add_bias(matmul(h, params[f"co.{n_hidden}.w"]), params[f"co.{n_hidden}.b"])

    def activations(self, params, x):
        """Per-layer post-activation representations plus the meta output,
        keyed by layer ('fe.0', ..., 'head')."""
        out = {}
        h = as_tensor(x)
        for i in range(len(self.spec.hidden_dims)):
            h = relu(add_bias(matmul(h, params[f"fe.{i}.w"]), params[f"fe.{i}.b"]))
            out[f"fe.{i}"] = h
        out["head"] = add_bias(matmul(h, params["head.w"]), params["head.b"])
        return out


def sinusoid_spec(hidden_dims=(40, 40), co_hidden_dims=(40,)):
    """The regression architecture: 1-d input, two hidden layers of 40, 1-d
    output, plus a one-hidden-layer co head of the same width."""
    return MlpSpec(1, tuple(hidden_dims), 1, tuple(co_hidden_dims))


def cluster_spec(dim, n_way, hidden_dims=(40, 40), co_hidden_dims=(40,)):
    """Classification architecture for the synthetic cluster task family."""
    return MlpSpec(int(dim), tuple(hidden_dims), int(n_way), tuple(co_hidden_dims))
