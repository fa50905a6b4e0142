"""Independent reference computations used by the tests.

Nothing here imports the code under test: losses are enumerated pair by pair in
plain Python floats, gradients are central finite differences.
"""
import math

import torch


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def _pair_loss(emb, anchor, keys, positives, tau):
    denom = sum(math.exp(_dot(emb[anchor], emb[k]) / tau) for k in keys)
    terms = [math.log(math.exp(_dot(emb[anchor], emb[p]) / tau) / denom) for p in positives]
    return -sum(terms) / len(terms)


def supcon_oracle(emb, labels, tau, num_anchors=None, key_mask=None):
    emb = [[float(v) for v in row] for row in emb]
    labels = [int(v) for v in labels]
    n = len(emb)
    anchors = n if num_anchors is None else num_anchors
    usable = [True] * n if key_mask is None else [bool(v) for v in key_mask]
    losses = []
    for a in range(anchors):
        keys = [k for k in range(n) if k != a and usable[k]]
        pos = [k for k in keys if labels[k] == labels[a]]
        if pos:
            losses.append(_pair_loss(emb, a, keys, pos, tau))
    return sum(losses) / len(losses) if losses else 0.0


def selfcon_oracle(emb, batch_size, num_views, tau, key_mask=None):
    emb = [[float(v) for v in row] for row in emb]
    n = len(emb)
    usable = [True] * n if key_mask is None else [bool(v) for v in key_mask]
    losses = []
    for b in range(batch_size):
        keys = [k for k in range(n) if k != b and usable[k]]
        pos = [b + v * batch_size for v in range(1, num_views) if usable[b + v * batch_size]]
        if pos:
            losses.append(_pair_loss(emb, b, keys, pos, tau))
    return sum(losses) / len(losses) if losses else 0.0


def finite_difference_check(loss_fn, tensors, eps=1e-6, rtol=1e-3, atol=1e-7):
    """Compare autograd against central differences element by element.

    Returns (n_ok, n_total, worst) where worst lists the largest mismatches."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    n_ok = n_total = 0
    worst = []
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            g = torch.zeros_like(t) if g is None else g
            flat, gflat = t.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                num = (up - down) / (2 * eps)
                ana = gflat[i].item()
                err = abs(ana - num)
                ok = err <= atol or err <= rtol * max(abs(ana), abs(num))
                n_ok += ok
                n_total += 1
                if not ok:
                    worst.append((err, ana, num))
    worst.sort(reverse=True)
    return n_ok, n_total, worst[:10]


def confusion_oracle(y_true, y_pred, num_classes):
    cm = [[0] * num_classes for _ in range(num_classes)]
    for t, p in zip(y_true, y_pred):
        cm[int(t)][int(p)] += 1
    return cm


def metrics_oracle(y_true, y_pred, num_classes):
    """Accuracy and macro precision / recall / F1 in percent, 0/0 counted as 0."""
    cm = confusion_oracle(y_true, y_pred, num_classes)
    total = sum(map(sum, cm))
    correct = sum(cm[k][k] for k in range(num_classes))
    precs, recs, f1s = [], [], []
    for k in range(num_classes):
        tp = cm[k][k]
        predicted = sum(cm[r][k] for r in range(num_classes))
        actual = sum(cm[k])
        p = tp / predicted if predicted else 0.0
        r = tp / actual if actual else 0.0
        precs.append(p)
        recs.append(r)
        f1s.append(2 * p * r / (p + r) if p + r else 0.0)
    mean = lambda v: 100.0 * sum(v) / len(v)
    return 100.0 * correct / total, mean(precs), mean(recs), mean(f1s)
