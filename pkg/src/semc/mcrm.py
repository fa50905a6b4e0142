"""Mixture-of-experts contrastive recognition: contrastive branch with a memory
queue, Gumbel-softmax gated classification, and adaptive loss balancing."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError, NumericalError, ShapeError, StateError

log = logging.getLogger(__name__)

EPS = 1e-12


def pool(x: torch.Tensor) -> torch.Tensor:
    return x.mean(dim=(2, 3))


class ProjectionHead(nn.Module):
    """Global average pool -> Linear -> ReLU -> Linear -> L2 normalise."""

    def __init__(self, in_channels, dim=128):
        super().__init__()
        self.fc1 = nn.Linear(in_channels, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, x):
        v = self.fc2(F.relu(self.fc1(pool(x))))
        return v / (v.norm(dim=1, keepdim=True) + EPS)


class ContrastiveQueue:
    """Fixed-capacity FIFO of detached embeddings and their labels (ring buffer)."""

    def __init__(self, capacity: int, dim: int, dtype=torch.float32):
        self.capacity = capacity
        self.dim = dim
        self._emb = torch.zeros(capacity, dim, dtype=dtype)
        self._labels = torch.zeros(capacity, dtype=torch.long)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def _order(self) -> torch.Tensor:
        if self.size < self.capacity:
            return torch.arange(self.size)
        return (torch.arange(self.capacity) + self.cursor) % self.capacity

    @property
    def embeddings(self) -> torch.Tensor:
        """Stored embeddings, oldest first."""
        return self._emb[self._order()]

    @property
    def labels(self) -> torch.Tensor:
        return self._labels[self._order()]

    @torch.no_grad()
    def enqueue(self, emb: torch.Tensor, labels: torch.Tensor) -> None:
        if emb.shape[0] != labels.shape[0]:
            raise StateError(f"{emb.shape[0]} embeddings but {labels.shape[0]} labels")
        if self.capacity == 0 or emb.shape[0] == 0:
            return
        emb = emb.detach().to(self._emb.dtype)
        labels = labels.detach().long()
        n = emb.shape[0]
        if n > self.capacity:
            emb, labels = emb[-self.capacity:], labels[-self.capacity:]
            self.cursor = (self.cursor + n - self.capacity) % self.capacity
            n = self.capacity
        idx = (torch.arange(n) + self.cursor) % self.capacity
        self._emb[idx] = emb.cpu()
        self._labels[idx] = labels.cpu()
        self.cursor = (self.cursor + n) % self.capacity
        self.size = min(self.capacity, self.size + n)

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "dim": self.dim, "embeddings": self.embeddings.clone(),
                "labels": self.labels.clone()}

    def load_state_dict(self, state: dict) -> None:
        if state["capacity"] != self.capacity or state["dim"] != self.dim:
            raise StateError("queue capacity/dimension mismatch")
        self._emb.zero_()
        self._labels.zero_()
        self.cursor = self.size = 0
        self.enqueue(state["embeddings"], state["labels"])


def queue_update(queue: ContrastiveQueue, key_views: Sequence[torch.Tensor], labels: torch.Tensor) -> None:
    """Enqueue each key view (E2, then E3, ...) in batch order with its labels."""
    for view in key_views:
        queue.enqueue(view.detach(), labels)


def build_contrastive_batch(views: Sequence[torch.Tensor], labels: torch.Tensor,
                            queue: Optional[ContrastiveQueue] = None):
    """Concatenate expert views and queue contents along the batch axis."""
    b = views[0].shape[0]
    if any(v.shape[0] != b for v in views) or labels.shape[0] != b:
        raise StateError("views and labels must share the batch size")
    emb = list(views)
    lab = [labels] * len(views)
    if queue is not None and len(queue):
        q_emb, q_lab = queue.embeddings, queue.labels
        if q_emb.shape[0] != q_lab.shape[0]:
            raise StateError("queue embeddings/labels out of sync")
        emb.append(q_emb.detach().to(views[0]))
        lab.append(q_lab.to(labels.device))
    return torch.cat(emb, dim=0), torch.cat(lab, dim=0)


def _log_ratio_loss(emb, anchors, pos_mask, temperature, key_mask=None):
    """Mean over anchors with positives of -mean_p log softmax_k(e_a.e_k / t)[p].

    anchors: (A,) row indices; pos_mask: (A, M) bool. Returns (loss, n_valid)."""
    if temperature <= 0:
        raise ConfigError("temperature must be > 0")
    m = emb.shape[0]
    logits = emb[anchors] @ emb.t() / temperature
    keys = torch.ones_like(pos_mask)
    keys[torch.arange(len(anchors)), anchors] = False
    if key_mask is not None:
        keys &= key_mask.to(keys.device).view(1, m)
    logits = logits.masked_fill(~keys, float("-inf"))
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    pos = pos_mask & keys
    n_pos = pos.sum(dim=1)
    valid = n_pos > 0
    if not valid.any():
        return emb.sum() * 0.0, 0
    mean_pos = log_prob.masked_fill(~pos, 0.0).sum(dim=1)[valid] / n_pos[valid]
    return -mean_pos.mean(), int(valid.sum())


def supcon_loss(emb: torch.Tensor, labels: torch.Tensor, temperature: float = 0.07,
                num_anchors: Optional[int] = None, key_mask: Optional[torch.Tensor] = None,
                stats: Optional[dict] = None) -> torch.Tensor:
    """Supervised contrastive loss; the first ``num_anchors`` rows are anchors and
    every row is a key. Anchors without positives are dropped from the mean."""
    if emb.shape[0] != labels.shape[0]:
        raise StateError("embedding/label count mismatch")
    n = emb.shape[0] if num_anchors is None else num_anchors
    anchors = torch.arange(n, device=emb.device)
    pos = labels[:n, None] == labels[None, :]
    loss, valid = _log_ratio_loss(emb, anchors, pos, temperature, key_mask)
    if valid == 0:
        log.debug("supcon: no anchor has a positive key")
        if stats is not None:
            stats["no_positives"] = stats.get("no_positives", 0) + 1
    return loss


def selfcon_loss(emb: torch.Tensor, batch_size: int, num_views: int = 3, temperature: float = 0.07,
                 key_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Label-free multi-view InfoNCE: anchor = view 1 of sample b, positives =
    the other views of sample b, negatives = every other row."""
    if emb.shape[0] < batch_size * num_views:
        raise StateError("contrastive batch is smaller than batch_size * num_views")
    anchors = torch.arange(batch_size, device=emb.device)
    pos = torch.zeros(batch_size, emb.shape[0], dtype=torch.bool, device=emb.device)
    for v in range(1, num_views):
        pos[anchors, anchors + v * batch_size] = True
    loss, _ = _log_ratio_loss(emb, anchors, pos, temperature, key_mask)
    return loss


@dataclass
class GateState:
    logits: torch.Tensor
    weights: torch.Tensor
    tau: float


def gumbel_softmax(logits, tau=1.0, noise=None, hard=False):
    """Soft relaxation softmax((l + g) / tau); ``noise=None`` draws fresh Gumbel(0, 1)."""
    if tau <= 0:
        raise ConfigError("gate temperature must be > 0")
    if noise is None:
        u = torch.rand_like(logits).clamp_(1e-10, 1.0 - 1e-10)
        noise = -torch.log(-torch.log(u))
    w = torch.softmax((logits + noise) / tau, dim=-1)
    if hard:
        onehot = F.one_hot(w.argmax(dim=-1), w.shape[-1]).to(w)
        w = onehot - w.detach() + w
    return w


class GumbelGate(nn.Module):
    """Pooled mean of expert features -> linear -> N logits -> Gumbel-softmax."""

    def __init__(self, channels, num_experts, tau=1.0, hard=False):
        super().__init__()
        self.linear = nn.Linear(channels, num_experts)
        self.tau = tau
        self.hard = hard
        self.noise_enabled = True

    def forward(self, feats: Sequence[torch.Tensor], noise=None) -> GateState:
        if self.tau <= 0:
            raise ConfigError("gate temperature must be > 0")
        x = torch.stack([pool(f) for f in feats]).mean(dim=0)
        logits = self.linear(x)
        if self.training and self.noise_enabled:
            w = gumbel_softmax(logits, self.tau, noise, self.hard)
        else:
            w = torch.softmax(logits / self.tau, dim=-1)
            if self.hard and self.training:
                w = gumbel_softmax(logits, self.tau, torch.zeros_like(logits), True)
        return GateState(logits, w, self.tau)


def fuse_logits(z: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """z: (B, N, C) expert logits, weights: (B, N) -> (B, C)."""
    if z.dim() != 3 or weights.shape != z.shape[:2]:
        raise ShapeError(f"gate weights {tuple(weights.shape)} do not match expert logits {tuple(z.shape)}")
    return torch.einsum("bn,bnc->bc", weights, z)


def moe_ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    c = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"label out of range [0, {c})")
    return F.cross_entropy(logits, labels)


class AlphaNet(nn.Module):
    """sigmoid(linear(pooled mean of expert features)), averaged over the batch."""

    def __init__(self, channels):
        super().__init__()
        self.linear = nn.Linear(channels, 1)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        x = torch.stack([pool(f) for f in feats]).mean(dim=0)
        return torch.sigmoid(self.linear(x)).mean()


@dataclass
class LossBreakdown:
    L_sup: torch.Tensor
    L_self: torch.Tensor
    L_mc: torch.Tensor
    L_moe: torch.Tensor
    alpha: torch.Tensor
    lam: float
    L_total: torch.Tensor
    L_aux: Optional[torch.Tensor] = None

    FIELDS = ("L_sup", "L_self", "L_mc", "L_moe", "alpha", "L_total")

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in self.FIELDS}


def total_loss(l_sup, l_self, l_moe, alpha, lam=0.5, l_aux=None, aux_weight=0.0) -> LossBreakdown:
    """L_mc = L_sup + lam * L_self; L_total = alpha * L_moe + (1 - alpha) * L_mc."""
    parts = {"L_sup": l_sup, "L_self": l_self, "L_moe": l_moe, "alpha": alpha}
    if l_aux is not None:
        parts["L_aux"] = l_aux
    parts = {k: v if torch.is_tensor(v) else torch.tensor(float(v), dtype=torch.float64) for k, v in parts.items()}
    for name, value in parts.items():
        if not torch.isfinite(value).all():
            raise NumericalError(f"{name} is not finite ({float(value.detach())})")
    l_mc = parts["L_sup"] + lam * parts["L_self"]
    a = parts["alpha"]
    l_total = a * parts["L_moe"] + (1 - a) * l_mc
    if l_aux is not None and aux_weight:
        l_total = l_total + aux_weight * parts["L_aux"]
    return LossBreakdown(parts["L_sup"], parts["L_self"], l_mc, parts["L_moe"], a, lam, l_total,
                         parts.get("L_aux"))


@dataclass
class MCRMOutput:
    embeddings: list[torch.Tensor]
    expert_logits: torch.Tensor
    gate: GateState
    logits: torch.Tensor
    alpha: torch.Tensor


class MCRM(nn.Module):
    def __init__(self, channels, num_experts, num_classes, embed_dim=128, gate_tau=1.0, gate_hard=False,
                 ema_keys=False, ema_momentum=0.999):
        super().__init__()
        self.num_experts = num_experts
        self.projection = ProjectionHead(channels, embed_dim)
        self.heads = nn.ModuleList(nn.Linear(channels, num_classes) for _ in range(num_experts))
        self.gate = GumbelGate(channels, num_experts, gate_tau, gate_hard)
        self.alpha_net = AlphaNet(channels)
        self.ema_momentum = ema_momentum
        self.key_projection = None
        if ema_keys:
            self.key_projection = ProjectionHead(channels, embed_dim)
            self.key_projection.load_state_dict(self.projection.state_dict())
            self.key_projection.requires_grad_(False)

    def forward(self, feats: Sequence[torch.Tensor], gate_noise=None, project=True) -> MCRMOutput:
        if len(feats) != self.num_experts:
            raise ShapeError(f"expected {self.num_experts} expert features, got {len(feats)}")
        z = torch.stack([head(pool(f)) for head, f in zip(self.heads, feats)], dim=1)
        gate = self.gate(feats, gate_noise)
        emb = [self.projection(f) for f in feats] if project else []
        return MCRMOutput(emb, z, gate, fuse_logits(z, gate.weights), self.alpha_net(feats))

    @torch.no_grad()
    def key_embeddings(self, feats: Sequence[torch.Tensor], fallback: Sequence[torch.Tensor]):
        """Embeddings pushed into the queue: EMA head outputs if enabled, else the current ones."""
        if self.key_projection is None:
            return [e.detach() for e in fallback]
        return [self.key_projection(f) for f in feats]

    @torch.no_grad()
    def momentum_update(self) -> None:
        if self.key_projection is None:
            return
        m = self.ema_momentum
        for pk, pq in zip(self.key_projection.parameters(), self.projection.parameters()):
            pk.mul_(m).add_(pq.detach(), alpha=1 - m)


def compute_losses(out: MCRMOutput, labels: torch.Tensor, queue: Optional[ContrastiveQueue], *,
                   temperature=0.07, lam=0.5, lmc_on=True, alpha_override: Optional[float] = None,
                   aux_weight=0.0, key_mask=None, stats=None) -> LossBreakdown:
    l_moe = moe_ce_loss(out.logits, labels)
    zero = l_moe.new_zeros(())
    if not lmc_on:
        return total_loss(zero, zero, l_moe, l_moe.new_ones(()), lam)
    b, n = labels.shape[0], len(out.embeddings)
    o_con, y_con = build_contrastive_batch(out.embeddings, labels, queue)
    l_sup = supcon_loss(o_con, y_con, temperature, num_anchors=n * b, key_mask=key_mask, stats=stats)
    l_self = selfcon_loss(o_con, b, n, temperature, key_mask=key_mask)
    alpha = out.alpha if alpha_override is None else l_moe.new_tensor(alpha_override)
    l_aux = None
    if aux_weight:
        flat = out.expert_logits.reshape(b * n, -1)
        l_aux = F.cross_entropy(flat, labels.repeat_interleave(n))
    return total_loss(l_sup, l_self, l_moe, alpha, lam, l_aux, aux_weight)


def anneal_tau(start: float, end: Optional[float], epoch: int, epochs: int) -> float:
    if end is None or epochs <= 1:
        return start
    return start + (end - start) * min(epoch, epochs - 1) / (epochs - 1)

