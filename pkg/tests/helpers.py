"""Shared specs and independent oracles for the test suite."""
import numpy as np

from cnds import network as nw


def deep_thin_spec(depth=10, channels=8, classes=10, pools=(0, 1)):
    """Narrow conv stack: ``depth`` 3x3 convs, pools after the given conv indices."""
    main = []
    for i in range(depth):
        main.append(nw.Conv(f"conv{i}", channels, 3, 1, 1))
        if i in pools:
            main.append(nw.Pool(f"pool{i}"))
    main += [nw.Linear("fc1", 64), nw.Linear("fc2", 64), nw.SoftmaxHead("head", classes)]
    return nw.NetworkSpec(tuple(main))


def tiny_branched_spec(alpha0=0.3):
    """Four main blocks (conv, pool, linear, head) plus one branch after the conv."""
    main = (
        nw.Conv("c1", 2, 3, 1, 1),
        nw.Pool("p1", 2, 2),
        nw.Linear("fc", 5),
        nw.SoftmaxHead("head", 3),
    )
    branch = nw.Branch("c1", (nw.Conv("c1_aux_conv", 1, 1), nw.SoftmaxHead("c1_aux_head", 3)), alpha0)
    return nw.NetworkSpec(main, (branch,))


def combined_objective(network, params, x, y, head_weights):
    rec = nw.forward(network, params, x)
    losses = nw.head_losses(rec, y)
    return sum(w * losses[h] for h, w in head_weights.items())


def finite_difference_check(network, params, x, y, head_weights, eps=1e-5):
    """Largest relative error between ``backward`` and central differences.

    Relative error uses ``|a - n| / max(|a| + |n|, 1e-8)`` per element.
    """
    rec = nw.forward(network, params, x)
    grads = nw.backward(network, params, rec, y, head_weights)
    worst = 0.0
    for key in params.keys():
        w = params[key]
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + eps
            params.version += 1
            up = combined_objective(network, params, x, y, head_weights)
            w[idx] = orig - eps
            params.version += 1
            down = combined_objective(network, params, x, y, head_weights)
            w[idx] = orig
            params.version += 1
            num = (up - down) / (2 * eps)
            ana = grads[key][idx]
            worst = max(worst, abs(ana - num) / max(abs(ana) + abs(num), 1e-8))
    return worst


def straight_line_forward(spec, params, x):
    """Main-head probabilities computed by hand-written loops over the block list."""
    for block in spec.main:
        if isinstance(block, nw.Pool):
            n, c, h, w = x.shape
            oh = (h - block.window) // block.stride + 1
            ow = (w - block.window) // block.stride + 1
            out = np.empty((n, c, oh, ow))
            for i in range(oh):
                for j in range(ow):
                    r, s = i * block.stride, j * block.stride
                    out[:, :, i, j] = x[:, :, r:r + block.window, s:s + block.window].max(axis=(2, 3))
            x = out
            continue
        wt, b = params[f"{block.name}.weight"], params[f"{block.name}.bias"]
        if isinstance(block, nw.Conv):
            p = block.pad
            xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
            k, st = block.kernel, block.stride
            oh = (xp.shape[2] - k) // st + 1
            ow = (xp.shape[3] - k) // st + 1
            out = np.empty((x.shape[0], block.out, oh, ow))
            for i in range(oh):
                for j in range(ow):
                    patch = xp[:, :, i * st:i * st + k, j * st:j * st + k]
                    out[:, :, i, j] = np.tensordot(patch, wt, axes=([1, 2, 3], [1, 2, 3])) + b
        else:
            out = x.reshape(len(x), -1) @ wt.T + b
        if getattr(block, "relu", False):
            out = np.maximum(out, 0)
        x = out
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
