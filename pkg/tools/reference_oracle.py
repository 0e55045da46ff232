#!/usr/bin/env python3
"""Independent reference run of the full adaptation pipeline, written in torch.

Shares nothing with ``ctxadapt`` beyond the file formats and the documented
conventions (RNG draw order, zero-init of final layers, per-epoch cosine
schedule). Gradients come from torch autograd, the optimizer is
``torch.optim.SGD``, the binary files are parsed here with ``struct``.

Usage::

    ctxadapt synth --seed 20240601 --out-dir /tmp/bench
    python tools/reference_oracle.py /tmp/bench/features.bin /tmp/bench/prototypes.bin \
        --lr 2e-4 --out tests/data/benchmark_reference.json
"""

import argparse
import hashlib
import json
import math
import struct

import numpy as np
import torch


def read_features(path):
    raw = open(path, "rb").read()
    magic, version, n, d, has_labels = struct.unpack_from("<8sIIIB", raw, 0)
    assert magic == b"COLAFEAT" and version == 1
    x = np.frombuffer(raw, dtype="<f4", count=n * d, offset=21).reshape(n, d)
    y = np.frombuffer(raw, dtype="<u4", count=n, offset=21 + 4 * n * d) if has_labels else None
    return x.astype(np.float32), None if y is None else y.astype(np.int64)


def read_prototypes(path):
    raw = open(path, "rb").read()
    magic, version, c, d, _ = struct.unpack_from("<8sIIIB", raw, 0)
    assert magic == b"COLAPROT" and version == 1
    emb = np.frombuffer(raw, dtype="<f4", count=c * d, offset=21).reshape(c, d).astype(np.float32)
    pos = 21 + 4 * c * d
    names = []
    for _ in range(c):
        (length,) = struct.unpack_from("<I", raw, pos)
        names.append(raw[pos + 4:pos + 4 + length].decode("utf-8"))
        pos += 4 + length
    return names, emb


def unit(t):
    return t / t.norm(dim=1, keepdim=True)


def zero_shot(x, emb, tau):
    probs = torch.softmax(unit(x) @ emb.T / tau, dim=1)
    conf, label = probs.max(dim=1)
    return label.numpy(), conf.double().numpy()


def cbpl(labels, conf, num_classes, global_threshold, ratio):
    """Literal per-class loop: sort, take top ceil(ratio * size), threshold = min(global threshold, last kept)."""
    keep, thresholds = [], []
    for k in range(num_classes):
        members = [i for i in range(len(labels)) if labels[i] == k]
        if not members:
            thresholds.append(None)
            continue
        ranked = sorted(members, key=lambda i: (-conf[i], i))
        top = max(1, math.ceil(round(ratio * len(members), 9)))
        threshold = min(global_threshold, conf[ranked[top - 1]])
        thresholds.append(float(threshold))
        keep += [i for i in members if conf[i] >= threshold]
    return sorted(keep), thresholds


class Module(torch.nn.Module):
    def __init__(self, d, h, depth, fusion, rng):
        super().__init__()

        def uniform(i, o):
            b = 1.0 / math.sqrt(i)
            w = torch.tensor(rng.uniform(-b, b, size=(i, o)).astype(np.float32))
            bias = torch.tensor(rng.uniform(-b, b, size=o).astype(np.float32))
            return torch.nn.Parameter(w), torch.nn.Parameter(bias)

        def zeros(i, o):
            return torch.nn.Parameter(torch.zeros(i, o)), torch.nn.Parameter(torch.zeros(o))

        self.a1 = torch.nn.ParameterList(uniform(d, h))
        self.a2 = torch.nn.ParameterList(zeros(h, d))
        dims = [d] + [h] * (depth - 1) + [d]
        self.mlp = torch.nn.ModuleList(
            [torch.nn.ParameterList(uniform(dims[i], dims[i + 1])) for i in range(depth - 1)]
            + [torch.nn.ParameterList(zeros(dims[-2], dims[-1]))]
        )
        self.gate_logit = torch.nn.Parameter(torch.zeros(()))
        self.fusion = fusion

    def forward(self, x):
        alpha, beta, gamma = self.fusion
        adapted = torch.relu(x @ self.a1[0] + self.a1[1]) @ self.a2[0] + self.a2[1]
        mean = x.mean(dim=0, keepdim=True)
        z = mean
        for i, layer in enumerate(self.mlp):
            z = z @ layer[0] + layer[1]
            if i < len(self.mlp) - 1:
                z = torch.relu(z)
        context = z + torch.sigmoid(self.gate_logit) * mean
        return unit(alpha * x + beta * adapted + gamma * context)


def per_class(pred, truth, c):
    acc = []
    for k in range(c):
        m = truth == k
        acc.append(float((pred[m] == k).mean()) if m.any() else None)
    valid = [a for a in acc if a is not None]
    return acc, float(np.mean(valid))


def run(x_np, y_np, names, emb_np, args, fusion):
    torch.manual_seed(0)
    x = torch.tensor(x_np)
    emb = torch.tensor(emb_np)
    c, d = emb.shape
    labels, conf = zero_shot(x, emb, args.tau)
    keep, thresholds = cbpl(labels, conf, c, args.tg, args.q)
    keep = np.array(keep)
    rng = np.random.default_rng(args.seed)
    model = Module(d, math.ceil(d / 4), 2, fusion, rng)
    opt = torch.optim.SGD(model.parameters(), lr=args.lr, momentum=0.9, weight_decay=1e-6)
    xs = x[keep]
    ys = torch.tensor(labels[keep])
    losses = []
    for epoch in range(args.epochs):
        for g in opt.param_groups:
            g["lr"] = 0.5 * args.lr * (1 + math.cos(math.pi * epoch / args.epochs))
        order = rng.permutation(len(keep))
        total = 0.0
        for lo in range(0, len(keep), args.batch_size):
            b = torch.tensor(order[lo:lo + args.batch_size])
            loss = torch.nn.functional.cross_entropy(model(xs[b]) @ emb.T / args.tau, ys[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(b)
        losses.append(total / len(keep))
    with torch.no_grad():
        pred = (model(x) @ emb.T).argmax(dim=1).numpy()
    zs_acc, zs_avg = per_class(labels, y_np, c)
    ad_acc, ad_avg = per_class(pred, y_np, c)
    return {
        "fusion": list(fusion),
        "num_retained": int(len(keep)),
        "class_histogram": np.bincount(labels[keep], minlength=c).tolist(),
        "thresholds": thresholds,
        "zero_shot_average": zs_avg,
        "zero_shot_per_class": zs_acc,
        "adapted_average": ad_avg,
        "adapted_per_class": ad_acc,
        "epoch_losses": losses,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("features")
    ap.add_argument("prototypes")
    ap.add_argument("--lr", type=float, required=True)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--batch-size", type=int, default=128)
    ap.add_argument("--tau", type=float, default=0.01)
    ap.add_argument("--tg", type=float, default=0.75)
    ap.add_argument("--q", type=float, default=0.75)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out")
    args = ap.parse_args()
    torch.set_num_threads(1)
    x, y = read_features(args.features)
    names, emb = read_prototypes(args.prototypes)
    result = {
        "settings": {k: v for k, v in vars(args).items() if k not in ("features", "prototypes", "out")},
        "features_sha256": hashlib.sha256(open(args.features, "rb").read()).hexdigest(),
        "default_fusion": run(x, y, names, emb, args, (0.1, 0.5, 1.0)),
        "weak_fusion": run(x, y, names, emb, args, (1.0, 0.5, 0.1)),
    }
    text = json.dumps(result, indent=2) + "\n"
    if args.out:
        open(args.out, "w").write(text)
    print(text)


if __name__ == "__main__":
    main()
