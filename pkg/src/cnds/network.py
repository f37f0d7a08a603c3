"""Layered networks with optional auxiliary classifier branches.

A network is a main path of blocks ending in a softmax head, plus side
branches that read the output of a main-path block and end in their own
softmax head.  Branches never feed back into the main path, so the
architecture is a tree and backward is a static reverse traversal.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T

MAIN = "main"


class SpecError(ValueError):
    """Raised for invalid network specifications."""


# ----------------------------------------------------------------------------
# Block and network specifications


@dataclass(frozen=True)
class Conv:
    name: str
    out: int
    kernel: int = 3
    stride: int = 1
    pad: int = 0
    relu: bool = True


@dataclass(frozen=True)
class Pool:
    name: str
    window: int = 2
    stride: int = 2


@dataclass(frozen=True)
class Linear:
    name: str
    out: int
    relu: bool = True


@dataclass(frozen=True)
class SoftmaxHead:
    """Affine map to ``classes`` logits followed by softmax."""

    name: str
    classes: int


Block = Union[Conv, Pool, Linear, SoftmaxHead]


@dataclass(frozen=True)
class Branch:
    attach_after: str
    blocks: Tuple[Block, ...]
    alpha0: float = 0.3


@dataclass(frozen=True)
class NetworkSpec:
    main: Tuple[Block, ...]
    branches: Tuple[Branch, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "main", tuple(self.main))
        object.__setattr__(
            self,
            "branches",
            tuple(
                Branch(b.attach_after, tuple(b.blocks), float(b.alpha0))
                for b in self.branches
            ),
        )

    @property
    def block_names(self) -> List[str]:
        names = [b.name for b in self.main]
        for br in self.branches:
            names.extend(b.name for b in br.blocks)
        return names

    def conv_names(self) -> List[str]:
        return [b.name for b in self.main if isinstance(b, Conv)]

    def without_branches(self) -> "NetworkSpec":
        return NetworkSpec(self.main, ())


def head_name(index: int) -> str:
    """Head identifier of the ``index``-th branch."""
    return f"branch{index}"


# ----------------------------------------------------------------------------
# Parameter storage


class ParameterStore:
    """Weights and biases keyed ``"<block>.weight"`` / ``"<block>.bias"``.

    Each block carries a partition label: ``"main"`` for main-path blocks
    and ``"branch<i>"`` for blocks of the i-th branch.  The same class holds
    accumulated gradients.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray], partition: Mapping[str, str]):
        self.arrays: Dict[str, np.ndarray] = dict(arrays)
        self.partition: Dict[str, str] = dict(partition)
        self.version = 0

    def __getitem__(self, key):
        return self.arrays[key]

    def __setitem__(self, key, value):
        self.arrays[key] = value

    def __contains__(self, key):
        return key in self.arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def keys(self):
        return self.arrays.keys()

    def items(self):
        return self.arrays.items()

    def label_of(self, key: str) -> str:
        return self.partition[key.rsplit(".", 1)[0]]

    def count(self, label: Optional[str] = None) -> int:
        """Number of scalar parameters, optionally restricted to a partition."""
        return int(
            sum(
                a.size
                for k, a in self.arrays.items()
                if label is None or self.label_of(k) == label
            )
        )

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: a.copy() for k, a in self.arrays.items()}, self.partition)

    def zeros_like(self) -> "ParameterStore":
        return ParameterStore(
            {k: np.zeros_like(a) for k, a in self.arrays.items()}, self.partition
        )

    def subset(self, blocks: Sequence[str]) -> "ParameterStore":
        keep = set(blocks)
        return ParameterStore(
            {k: a for k, a in self.arrays.items() if k.rsplit(".", 1)[0] in keep},
            {b: lbl for b, lbl in self.partition.items() if b in keep},
        )

    def equal(self, other: "ParameterStore") -> bool:
        """Bitwise equality of keys, order, partition and values."""
        return (
            list(self.arrays) == list(other.arrays)
            and self.partition == other.partition
            and all(
                a.shape == other[k].shape and np.array_equal(a, other[k])
                for k, a in self.arrays.items()
            )
        )

    def __repr__(self):
        return f"ParameterStore({len(self.arrays)} arrays, {self.count()} scalars)"


GradientStore = ParameterStore


# ----------------------------------------------------------------------------
# Built network


def _has_params(block: Block) -> bool:
    return isinstance(block, (Conv, Linear, SoftmaxHead))


class Network:
    """A validated :class:`NetworkSpec` with every block shape resolved.

    Use :func:`build` rather than constructing directly.
    """

    def __init__(self, spec: NetworkSpec, input_shape: Tuple[int, ...]):
        self.spec = spec
        self.input_shape = tuple(int(s) for s in input_shape)
        self.in_shapes: Dict[str, Tuple[int, ...]] = {}
        self.out_shapes: Dict[str, Tuple[int, ...]] = {}
        self.param_shapes: Dict[str, Tuple[Tuple[int, ...], Tuple[int, ...]]] = {}
        self.partition: Dict[str, str] = {}
        self.blocks: Dict[str, Block] = {}
        self.paths: Dict[str, Tuple[Block, ...]] = {MAIN: spec.main}
        self.attach_index: Dict[str, int] = {}
        self._validate()

    @property
    def heads(self) -> List[str]:
        return list(self.paths)

    def _validate(self):
        spec = self.spec
        names = spec.block_names
        dup = sorted({n for n in names if names.count(n) > 1})
        if dup:
            raise SpecError(f"duplicate block names: {dup}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input shape must be (C, H, W), got {self.input_shape}")
        self._resolve(spec.main, self.input_shape, MAIN)

        main_names = [b.name for b in spec.main]
        first_fc = next(
            (i for i, b in enumerate(spec.main) if isinstance(b, (Linear, SoftmaxHead))),
            len(spec.main),
        )
        seen = set()
        for i, br in enumerate(spec.branches):
            if br.attach_after not in main_names:
                raise SpecError(f"unknown attach point {br.attach_after!r}")
            idx = main_names.index(br.attach_after)
            if idx >= first_fc:
                raise SpecError(
                    f"attach point {br.attach_after!r} is not before the first "
                    "fully connected layer"
                )
            if br.attach_after in seen:
                raise SpecError(f"duplicate attach point {br.attach_after!r}")
            if br.alpha0 < 0:
                raise SpecError(f"alpha0 must be >= 0, got {br.alpha0}")
            seen.add(br.attach_after)
            label = head_name(i)
            self.paths[label] = br.blocks
            self.attach_index[label] = idx
            self._resolve(br.blocks, self.out_shapes[br.attach_after], label)

    def _resolve(self, blocks, shape, label):
        if not blocks or not isinstance(blocks[-1], SoftmaxHead):
            raise SpecError(f"path {label!r} must end in a softmax head")
        if any(isinstance(b, SoftmaxHead) for b in blocks[:-1]):
            raise SpecError(f"path {label!r} has more than one softmax head")
        flat = False
        for b in blocks:
            self.in_shapes[b.name] = shape
            if isinstance(b, Conv):
                if flat:
                    raise SpecError(f"conv {b.name!r} follows a fully connected layer")
                if b.out < 1 or b.kernel < 1 or b.stride < 1 or b.pad < 0:
                    raise SpecError(f"invalid conv parameters in {b!r}")
                c, h, w = shape
                try:
                    oh = T.conv_output_size(h, b.kernel, b.stride, b.pad)
                    ow = T.conv_output_size(w, b.kernel, b.stride, b.pad)
                except T.ShapeError as exc:
                    raise SpecError(f"block {b.name!r}: {exc}") from None
                self.param_shapes[b.name] = ((b.out, c, b.kernel, b.kernel), (b.out,))
                shape = (b.out, oh, ow)
            elif isinstance(b, Pool):
                if flat:
                    raise SpecError(f"pool {b.name!r} follows a fully connected layer")
                c, h, w = shape
                if b.window < 1 or b.stride < 1 or b.window > min(h, w):
                    raise SpecError(f"block {b.name!r}: window {b.window} does not fit {shape}")
                shape = (
                    c,
                    T.conv_output_size(h, b.window, b.stride, 0),
                    T.conv_output_size(w, b.window, b.stride, 0),
                )
            else:
                out = b.out if isinstance(b, Linear) else b.classes
                if out < 1:
                    raise SpecError(f"block {b.name!r}: output size must be positive")
                fan_in = int(np.prod(shape))
                self.param_shapes[b.name] = ((out, fan_in), (out,))
                shape = (out,)
                flat = True
            self.out_shapes[b.name] = shape
            self.partition[b.name] = label
            self.blocks[b.name] = b

    def num_classes(self, head: str = MAIN) -> int:
        return self.paths[head][-1].classes

    def __repr__(self):
        return (
            f"Network(input={self.input_shape}, main={len(self.spec.main)} blocks, "
            f"branches={len(self.spec.branches)})"
        )


def build(spec: NetworkSpec, input_shape) -> Network:
    """Validate ``spec`` against ``input_shape`` (C, H, W) and resolve shapes."""
    return Network(spec, input_shape)


def init_params(network: Network, seed: int = 0, std: float = 0.01) -> ParameterStore:
    """Gaussian weights with zero mean and standard deviation ``std``; zero biases."""
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, (wshape, bshape) in network.param_shapes.items():
        arrays[f"{name}.weight"] = rng.normal(0.0, std, size=wshape)
        arrays[f"{name}.bias"] = np.zeros(bshape)
    partition = {n: network.partition[n] for n in network.param_shapes}
    return ParameterStore(arrays, partition)


# ----------------------------------------------------------------------------
# Forward / backward


class StaleRecordError(ValueError):
    """Activation record does not belong to the given network/parameters."""


@dataclass
class ActivationRecord:
    network: Network
    params_id: int
    params_version: int
    heads: Tuple[str, ...]
    inputs: Dict[str, np.ndarray] = field(default_factory=dict)
    outputs: Dict[str, np.ndarray] = field(default_factory=dict)
    argmax: Dict[str, np.ndarray] = field(default_factory=dict)
    logits: Dict[str, np.ndarray] = field(default_factory=dict)
    probs: Dict[str, np.ndarray] = field(default_factory=dict)


def _block_forward(block, x, params, rec):
    rec.inputs[block.name] = x
    if isinstance(block, Conv):
        out = T.conv2d(
            x, params[f"{block.name}.weight"], params[f"{block.name}.bias"],
            block.stride, block.pad,
        )
        if block.relu:
            out = T.relu(out)
    elif isinstance(block, Pool):
        out, rec.argmax[block.name] = T.maxpool(x, block.window, block.stride)
    else:
        out = T.linear(x, params[f"{block.name}.weight"], params[f"{block.name}.bias"])
        if isinstance(block, Linear) and block.relu:
            out = T.relu(out)
    rec.outputs[block.name] = out
    return out


def _run_path(blocks, x, params, rec, head):
    for block in blocks:
        x = _block_forward(block, x, params, rec)
    rec.logits[head] = x
    rec.probs[head] = T.softmax(x)


def forward(network: Network, params: ParameterStore, batch, heads=None) -> ActivationRecord:
    """Evaluate the network on ``batch`` (N, C, H, W).

    ``heads`` restricts evaluation to a subset of heads; the main path is
    always evaluated as far as the deepest requested attach point.
    """
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1:] != network.input_shape:
        raise T.ShapeError(
            f"batch shape {batch.shape} does not match network input "
            f"(N,) + {network.input_shape}"
        )
    heads = tuple(network.heads if heads is None else heads)
    unknown = set(heads) - set(network.heads)
    if unknown:
        raise KeyError(f"unknown heads: {sorted(unknown)}")
    rec = ActivationRecord(network, id(params), params.version, heads)

    main = network.spec.main
    if MAIN in heads:
        stop = len(main)
    else:
        stop = max((network.attach_index[h] + 1 for h in heads), default=0)
    x = batch
    for i, block in enumerate(main[:stop]):
        x = _block_forward(block, x, params, rec)
    if MAIN in heads:
        rec.logits[MAIN] = x
        rec.probs[MAIN] = T.softmax(x)
    for i, branch in enumerate(network.spec.branches):
        h = head_name(i)
        if h in heads:
            _run_path(branch.blocks, rec.outputs[branch.attach_after], params, rec, h)
    return rec


def predict_proba(network: Network, params: ParameterStore, images, head=MAIN, chunk=512):
    """Head probabilities for ``images``, evaluated in chunks."""
    images = np.asarray(images)
    out = [
        forward(network, params, images[i:i + chunk], heads=(head,)).probs[head]
        for i in range(0, len(images), chunk)
    ]
    if not out:
        return np.zeros((0, network.num_classes(head)))
    return np.concatenate(out)


def head_losses(record: ActivationRecord, labels) -> Dict[str, float]:
    """Mean cross-entropy of every evaluated head."""
    labels = np.asarray(labels)
    out = {}
    for h, logits in record.logits.items():
        lp = T.log_softmax(logits)
        T.check_labels(labels, lp.shape[1])
        out[h] = float(-lp[np.arange(len(labels)), labels].mean())
    return out


def _block_backward(block, dout, params, rec, grads, scale=1.0):
    x = rec.inputs[block.name]
    if isinstance(block, Pool):
        return T.maxpool_backward(dout, rec.argmax[block.name], x.shape)
    if getattr(block, "relu", False):
        dout = T.relu_backward(dout, rec.outputs[block.name])
    w = params[f"{block.name}.weight"]
    if isinstance(block, Conv):
        dx, dw, db = T.conv2d_backward(dout, x, w, block.stride, block.pad)
    else:
        dx, dw, db = T.linear_backward(dout, x, w)
    if scale != 1.0:
        dw, db = scale * dw, scale * db
    grads[f"{block.name}.weight"] += dw
    grads[f"{block.name}.bias"] += db
    return dx


def backward(network: Network, params: ParameterStore, record: ActivationRecord,
             labels, head_weights) -> GradientStore:
    """Accumulate ``sum_h weight_h * d(loss_h)/d(params)`` over heads.

    ``head_weights`` maps head names (``"main"``, ``"branch<i>"``) to their
    loss weights; heads not listed contribute nothing.  A branch head only
    reaches its own parameters and the main-path blocks up to and including
    its attach point.
    """
    if (record.network is not network or record.params_id != id(params)
            or record.params_version != params.version):
        raise StaleRecordError("activation record was produced by different parameters")
    head_weights = dict(head_weights)
    missing = [h for h, w in head_weights.items() if w != 0 and h not in record.logits]
    if missing:
        raise StaleRecordError(f"heads {missing} were not evaluated in this record")
    labels = np.asarray(labels)
    grads = params.zeros_like()

    def seed(head):
        return T.softmax_cross_entropy_backward(record.probs[head], labels)

    # Branches propagate the unweighted gradient and apply their weight once,
    # so branch-parameter gradients are exactly weight * unit gradient.
    injected: Dict[int, np.ndarray] = {}
    for i, branch in enumerate(network.spec.branches):
        h = head_name(i)
        weight = head_weights.get(h, 0)
        if weight == 0:
            continue
        d = seed(h)
        for block in reversed(branch.blocks):
            d = _block_backward(block, d, params, record, grads, weight)
        injected[network.attach_index[h]] = weight * d

    main = network.spec.main
    d = head_weights[MAIN] * seed(MAIN) if head_weights.get(MAIN, 0) != 0 else None
    for idx in range(len(main) - 1, -1, -1):
        if idx in injected:
            d = injected[idx] if d is None else d + injected[idx]
        if d is None:
            continue
        d = _block_backward(main[idx], d, params, record, grads)
    return grads


def mean_gradient_magnitude(grads: GradientStore, block_name: str) -> float:
    """Mean absolute value of a block's weight gradient (biases excluded)."""
    key = f"{block_name}.weight"
    if key not in grads:
        raise KeyError(f"block {block_name!r} has no weight parameters")
    return float(np.mean(np.abs(grads[key])))
