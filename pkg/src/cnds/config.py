"""Line-oriented run configuration.

::

    [network]
    conv conv1 out=8 k=3 s=1 p=1 relu
    pool pool1 w=2 s=2
    linear fc1 out=64 relu
    softmax head classes=10

    [branches]
    attach=conv1 conv_out=4 fc=64,64,10 alpha0=0.3

    [train]
    epochs=10
    lr=0.01
    lr_drop=7:0.1

    [data]
    source=synthetic
    count=1000

``fc`` lists the hidden widths followed by the class count.  Optional
branch keys ``conv_k``, ``conv_s``, ``conv_p`` and ``conv_relu`` set the
branch convolution.  ``#`` starts a comment.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .data import Dataset, load_idx, synthetic_dataset
from .network import Branch, Conv, Linear, NetworkSpec, Pool, SoftmaxHead
from .trainer import TrainingConfig

SECTIONS = ("network", "branches", "train", "data", "meta")

_TRAIN_KEYS = {
    "epochs": ("epochs", int),
    "batch_size": ("batch_size", int),
    "lr": ("learning_rate", float),
    "momentum": ("momentum", float),
    "weight_decay": ("weight_decay", float),
    "alpha0": ("alpha0", float),
    "seed": ("seed", int),
    "init_std": ("init_std", float),
    "snapshot_every": ("snapshot_every", int),
    "crop": ("crop", int),
    "flip": ("flip", lambda v: bool(int(v))),
}


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


@dataclass
class RunConfig:
    spec: NetworkSpec
    train: TrainingConfig = field(default_factory=TrainingConfig)
    data: Dict[str, str] = field(default_factory=dict)
    meta: Dict[str, str] = field(default_factory=dict)
    base_dir: Path = Path(".")

    @property
    def input_shape(self) -> Optional[Tuple[int, ...]]:
        if "input" in self.meta:
            return _ints(self.meta["input"])
        return None


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v)


def _kv(tokens, lineno):
    out = {}
    flags = []
    for tok in tokens:
        if "=" in tok:
            k, v = tok.split("=", 1)
            if k in out:
                raise ConfigError(f"duplicate key {k!r}", lineno)
            out[k] = v
        else:
            flags.append(tok)
    return out, flags


def _parse_block(tokens, lineno):
    if len(tokens) < 2:
        raise ConfigError("block line needs a kind and a name", lineno)
    kind, name = tokens[0], tokens[1]
    kv, flags = _kv(tokens[2:], lineno)
    allowed_flags = {"relu"} if kind in ("conv", "linear") else set()
    if set(flags) - allowed_flags:
        raise ConfigError(f"unexpected tokens {sorted(set(flags) - allowed_flags)}", lineno)
    relu = "relu" in flags
    try:
        if kind == "conv":
            block = Conv(name, int(kv.pop("out")), int(kv.pop("k", 3)), int(kv.pop("s", 1)),
                         int(kv.pop("p", 0)), relu)
        elif kind == "pool":
            block = Pool(name, int(kv.pop("w", 2)), int(kv.pop("s", 2)))
        elif kind == "linear":
            block = Linear(name, int(kv.pop("out")), relu)
        elif kind == "softmax":
            block = SoftmaxHead(name, int(kv.pop("classes")))
        else:
            raise ConfigError(f"unknown block kind {kind!r}", lineno)
    except KeyError as exc:
        raise ConfigError(f"{kind} block {name!r} is missing {exc.args[0]!r}", lineno) from None
    except ValueError as exc:
        raise ConfigError(str(exc), lineno) from None
    if kv:
        raise ConfigError(f"unknown keys {sorted(kv)} for {kind}", lineno)
    return block


def _parse_branch(tokens, lineno):
    kv, flags = _kv(tokens, lineno)
    if flags:
        raise ConfigError(f"unexpected tokens {flags}", lineno)
    try:
        attach = kv.pop("attach")
        dims = _ints(kv.pop("fc"))
        if not dims:
            raise ConfigError("fc needs at least the class count", lineno)
        alpha0 = float(kv.pop("alpha0", 0.3))
        conv = Conv(f"{attach}_aux_conv", int(kv.pop("conv_out")), int(kv.pop("conv_k", 1)),
                    int(kv.pop("conv_s", 1)), int(kv.pop("conv_p", 0)),
                    bool(int(kv.pop("conv_relu", 1))))
    except KeyError as exc:
        raise ConfigError(f"branch is missing {exc.args[0]!r}", lineno) from None
    except ValueError as exc:
        raise ConfigError(str(exc), lineno) from None
    if kv:
        raise ConfigError(f"unknown branch keys {sorted(kv)}", lineno)
    blocks = [conv]
    blocks += [Linear(f"{attach}_aux_fc{i + 1}", d, True) for i, d in enumerate(dims[:-1])]
    blocks.append(SoftmaxHead(f"{attach}_aux_head", dims[-1]))
    return Branch(attach, tuple(blocks), alpha0)


def _parse_lr_drop(text, lineno):
    out = []
    for item in filter(None, text.split(",")):
        try:
            epoch, mult = item.split(":")
            out.append((int(epoch), float(mult)))
        except ValueError:
            raise ConfigError(f"bad lr_drop entry {item!r}; expected epoch:multiplier", lineno) from None
    return tuple(out)


def parse_config(text: str, base_dir=".") -> RunConfig:
    section = None
    main: List = []
    branches: List[Branch] = []
    train_kwargs = {}
    data, meta = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        tokens = line.split()
        if section is None:
            raise ConfigError("content before the first section header", lineno)
        if section == "network":
            main.append(_parse_block(tokens, lineno))
        elif section == "branches":
            branches.append(_parse_branch(tokens, lineno))
        else:
            kv, flags = _kv(tokens, lineno)
            if flags:
                raise ConfigError(f"expected key=value, got {flags}", lineno)
            if section == "train":
                for k, v in kv.items():
                    if k == "lr_drop":
                        train_kwargs["lr_schedule"] = _parse_lr_drop(v, lineno)
                        continue
                    if k not in _TRAIN_KEYS:
                        raise ConfigError(f"unknown train key {k!r}", lineno)
                    attr, conv = _TRAIN_KEYS[k]
                    try:
                        train_kwargs[attr] = conv(v)
                    except ValueError:
                        raise ConfigError(f"bad value for {k}: {v!r}", lineno) from None
            elif section == "data":
                data.update(kv)
            else:
                meta.update(kv)
    if not main:
        raise ConfigError("[network] section is empty")
    try:
        train = TrainingConfig(**train_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(NetworkSpec(tuple(main), tuple(branches)), train, data, meta, Path(base_dir))


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), path.parent)


# ----------------------------------------------------------------------------
# printing


def _format_block(b) -> str:
    if isinstance(b, Conv):
        return f"conv {b.name} out={b.out} k={b.kernel} s={b.stride} p={b.pad}" + (" relu" if b.relu else "")
    if isinstance(b, Pool):
        return f"pool {b.name} w={b.window} s={b.stride}"
    if isinstance(b, Linear):
        return f"linear {b.name} out={b.out}" + (" relu" if b.relu else "")
    return f"softmax {b.name} classes={b.classes}"


def _format_branch(br: Branch) -> str:
    blocks = br.blocks
    a = br.attach_after
    conv, hidden, head = blocks[0], blocks[1:-1], blocks[-1]
    ok = (
        isinstance(conv, Conv) and conv.name == f"{a}_aux_conv"
        and isinstance(head, SoftmaxHead) and head.name == f"{a}_aux_head"
        and all(isinstance(h, Linear) and h.relu and h.name == f"{a}_aux_fc{i + 1}"
                for i, h in enumerate(hidden))
    )
    if not ok:
        raise ConfigError(f"branch at {a!r} does not follow the conv/fc/softmax template")
    fc = ",".join(str(h.out) for h in hidden) + ("," if hidden else "") + str(head.classes)
    return (f"attach={a} conv_out={conv.out} conv_k={conv.kernel} conv_s={conv.stride} "
            f"conv_p={conv.pad} conv_relu={int(conv.relu)} fc={fc} alpha0={br.alpha0!r}")


def format_spec(spec: NetworkSpec, meta: Optional[Dict[str, object]] = None) -> str:
    lines = ["[network]"] + [_format_block(b) for b in spec.main]
    if spec.branches:
        lines += ["", "[branches]"] + [_format_branch(br) for br in spec.branches]
    if meta:
        lines += ["", "[meta]"] + [f"{k}={v}" for k, v in meta.items()]
    return "\n".join(lines) + "\n"


def format_config(cfg: RunConfig) -> str:
    text = format_spec(cfg.spec)
    names = {attr: key for key, (attr, _) in _TRAIN_KEYS.items()}
    lines = ["", "[train]"]
    for f in fields(TrainingConfig):
        value = getattr(cfg.train, f.name)
        if f.name == "lr_schedule":
            if value is not None:
                lines.append("lr_drop=" + ",".join(f"{e}:{m!r}" for e, m in value))
        elif value is not None:
            lines.append(f"{names[f.name]}={int(value) if isinstance(value, bool) else value!r}")
    if cfg.data:
        lines += ["", "[data]"] + [f"{k}={v}" for k, v in cfg.data.items()]
    if cfg.meta:
        lines += ["", "[meta]"] + [f"{k}={v}" for k, v in cfg.meta.items()]
    return text + "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# data section


def load_data(cfg: RunConfig) -> Tuple[Dataset, Optional[Dataset]]:
    """Build ``(train, val)`` datasets from the ``[data]`` section."""
    d = dict(cfg.data)
    source = d.get("source")
    classes = int(d["classes"]) if "classes" in d else None
    if source == "idx":
        def path(key):
            p = Path(d[key])
            return p if p.is_absolute() else cfg.base_dir / p

        try:
            train = load_idx(path("images"), path("labels"), classes)
            val = None
            if "val_images" in d:
                val = load_idx(path("val_images"), path("val_labels"), train.num_classes)
        except KeyError as exc:
            raise ConfigError(f"[data] is missing {exc.args[0]!r}") from None
    elif source == "synthetic":
        shape = _ints(d.get("shape", "1,28,28"))
        k = classes or 10
        diff = float(d.get("difficulty", 1.0))
        seed = int(d.get("seed", 0))
        pattern = int(d.get("pattern_seed", 0))
        train = synthetic_dataset(seed, int(d.get("count", 1000)), shape, k, diff, pattern)
        val = None
        if int(d.get("val_count", 0)):
            val = synthetic_dataset(seed + 1, int(d["val_count"]), shape, k, diff, pattern)
    else:
        raise ConfigError(f"[data] source must be 'idx' or 'synthetic', got {source!r}")
    if "limit" in d:
        train = train.head(int(d["limit"]))
    if val is not None and "val_limit" in d:
        val = val.head(int(d["val_limit"]))
    return train, val
