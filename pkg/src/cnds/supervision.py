"""Deep supervision: gradient probing, branch placement, loss weighting."""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import network as nw
from .data import Dataset, batches
from .network import MAIN, Branch, Conv, Linear, NetworkSpec, SoftmaxHead, SpecError

DEFAULT_ALPHA0 = 0.3
DEFAULT_THRESHOLD = 1e-7


@dataclass(frozen=True)
class ProbeConfig:
    iterations: int = 30
    threshold: float = DEFAULT_THRESHOLD
    batch_size: int = 128
    seed: int = 0
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    init_std: float = 0.01
    spacing: int = 3

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.threshold > 0:
            raise ValueError("threshold must be > 0")
        if self.spacing < 1:
            raise ValueError("spacing must be >= 1")


@dataclass
class ProbeReport:
    blocks: List[str]
    magnitudes: np.ndarray  # (iterations, blocks)
    threshold: float
    recommended_attach_points: List[str] = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.magnitudes[-1]

    @property
    def flagged(self) -> List[str]:
        return [b for b, m in zip(self.blocks, self.final) if m < self.threshold]

    def magnitude(self, block, iteration=-1) -> float:
        return float(self.magnitudes[iteration, self.blocks.index(block)])

    def to_csv(self, path=None) -> str:
        """``iteration,block,mean_grad_magnitude`` rows; returns the text."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "block", "mean_grad_magnitude"])
        for it, row in enumerate(self.magnitudes):
            for block, value in zip(self.blocks, row):
                writer.writerow([it, block, f"{value:.10e}"])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text: str, threshold=DEFAULT_THRESHOLD) -> "ProbeReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        blocks = list(dict.fromkeys(r["block"] for r in rows))
        iters = max(int(r["iteration"]) for r in rows) + 1
        mags = np.zeros((iters, len(blocks)))
        for r in rows:
            mags[int(r["iteration"]), blocks.index(r["block"])] = float(r["mean_grad_magnitude"])
        report = cls(blocks, mags, threshold)
        report.recommended_attach_points = recommend_attach_points(report.blocks, report.final, threshold)
        return report


@dataclass(frozen=True)
class AlphaSchedule:
    alpha0: float = DEFAULT_ALPHA0
    total_epochs: int = 1

    def __post_init__(self):
        if self.alpha0 < 0:
            raise ValueError("alpha0 must be >= 0")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")


@dataclass(frozen=True)
class BranchTemplate:
    """Shape of an auxiliary classifier: one conv, hidden FC layers, softmax.

    ``conv_out=None`` halves the channel count at the attach point.
    """

    classes: int
    conv_out: Optional[int] = None
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    conv_relu: bool = True
    hidden: Tuple[int, ...] = (64, 64)

    def blocks(self, attach_after: str, in_channels: int):
        out = self.conv_out or max(in_channels // 2, 1)
        prefix = f"{attach_after}_aux"
        blocks = [Conv(f"{prefix}_conv", out, self.kernel, self.stride, self.pad, self.conv_relu)]
        blocks += [Linear(f"{prefix}_fc{i + 1}", d, True) for i, d in enumerate(self.hidden)]
        blocks.append(SoftmaxHead(f"{prefix}_head", self.classes))
        return tuple(blocks)


def alpha_at(schedule: AlphaSchedule, t) -> float:
    """Companion-loss weight at epoch ``t``: ``alpha0 * (1 - t / N)``."""
    n = schedule.total_epochs
    if not 0 <= t <= n:
        raise ValueError(f"epoch {t} outside [0, {n}]")
    return schedule.alpha0 * (1.0 - t / n)


def combined_loss(main_loss, branch_losses: Sequence[Tuple[float, float]]) -> float:
    """Main loss plus alpha-weighted branch losses."""
    return float(main_loss + sum(a * loss for a, loss in branch_losses))


def attach_branch(spec: NetworkSpec, attach_after: str, template: BranchTemplate,
                  alpha0: float = DEFAULT_ALPHA0, input_shape=None) -> NetworkSpec:
    """Return a copy of ``spec`` with an auxiliary branch after ``attach_after``.

    ``input_shape`` is needed only when the template halves channels and
    the attach point is a pool block (whose channel count depends on the
    input).
    """
    main_names = [b.name for b in spec.main]
    if attach_after not in main_names:
        raise SpecError(f"unknown attach point {attach_after!r}")
    if any(b.attach_after == attach_after for b in spec.branches):
        raise SpecError(f"duplicate attach point {attach_after!r}")
    if alpha0 < 0:
        raise ValueError("alpha0 must be >= 0")
    idx = main_names.index(attach_after)
    if any(isinstance(b, (Linear, SoftmaxHead)) for b in spec.main[:idx + 1]):
        raise SpecError(
            f"attach point {attach_after!r} is not before the first fully connected layer"
        )
    channels = _channels_at(spec, idx, input_shape)
    branch = Branch(attach_after, template.blocks(attach_after, channels), alpha0)
    return NetworkSpec(spec.main, spec.branches + (branch,))


def _channels_at(spec, idx, input_shape):
    for block in reversed(spec.main[:idx + 1]):
        if isinstance(block, Conv):
            return block.out
    if input_shape is None:
        raise SpecError("input_shape needed to infer channels at the attach point")
    return input_shape[0]


def recommend_attach_points(blocks: Sequence[str], final: Sequence[float],
                            threshold: float, spacing: int = 3) -> List[str]:
    """Placement rule over conv blocks listed shallow-to-deep.

    The deepest block whose final magnitude is below ``threshold`` gets a
    branch.  When the flagged run below it spans more than four conv
    blocks, further branches go every ``spacing`` blocks downward while the
    block there is still flagged.
    """
    flagged = [m < threshold for m in final]
    if not any(flagged):
        return []
    deepest = max(i for i, f in enumerate(flagged) if f)
    run = 0
    while deepest - run >= 0 and flagged[deepest - run]:
        run += 1
    points = [deepest]
    if run > 4:
        i = deepest - spacing
        while i >= 0 and flagged[i]:
            points.append(i)
            i -= spacing
    return [blocks[i] for i in points]


def gradient_trace(spec: NetworkSpec, data: Dataset, cfg: ProbeConfig,
                   blocks: Optional[Sequence[str]] = None) -> Tuple[List[str], np.ndarray]:
    """Run ``cfg.iterations`` SGD steps and record per-block gradient magnitudes.

    Magnitudes are measured before each update.  Branch heads, if any, are
    weighted by their ``alpha0``.  Returns ``(blocks, magnitudes)``.
    """
    from .trainer import OptimizerState, sgd_step

    if len(data) == 0:
        raise ValueError("probe needs a nonempty dataset")
    net = nw.build(spec, data.image_shape)
    params = nw.init_params(net, cfg.seed, cfg.init_std)
    state = OptimizerState.zeros_like(params)
    blocks = list(blocks) if blocks is not None else spec.conv_names()
    weights = {MAIN: 1.0}
    weights.update({nw.head_name(i): b.alpha0 for i, b in enumerate(spec.branches)})

    def stream():
        for epoch in itertools.count():
            yield from batches(data, cfg.batch_size, cfg.seed, epoch)

    mags = np.zeros((cfg.iterations, len(blocks)))
    for it, (x, y) in zip(range(cfg.iterations), stream()):
        rec = nw.forward(net, params, x)
        grads = nw.backward(net, params, rec, y, weights)
        mags[it] = [nw.mean_gradient_magnitude(grads, b) for b in blocks]
        sgd_step(params, grads, state, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    return blocks, mags


def probe_vanishing(spec: NetworkSpec, data: Dataset, cfg: ProbeConfig = ProbeConfig()) -> ProbeReport:
    """Train briefly under the main loss only and locate vanishing gradients."""
    if spec.branches:
        raise SpecError("probe runs on a branchless network; strip branches first")
    blocks, mags = gradient_trace(spec, data, cfg)
    report = ProbeReport(blocks, mags, cfg.threshold)
    report.recommended_attach_points = recommend_attach_points(
        blocks, mags[-1], cfg.threshold, cfg.spacing
    )
    return report
