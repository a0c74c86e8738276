"""Convolutional TAF encoder trained with supervised contrastive learning.

The network maps a ``(3, 2, rho)`` TAF tensor to a unit vector of length
``eta``:

    log1p -> 2 x Conv2d block over (direction, window) -> max-pool over the
    direction axis -> 4 x residual Conv1d block over windows -> adaptive
    average pool -> linear -> L2 normalize
"""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .features import TafConfig, TafTransformer
from .traces import Dataset

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    eta: int = 128
    gamma: float = 0.1
    rho: int = 2000
    theta_ms: float = 80.0
    conv2d_channels: tuple = (32, 64)
    conv2d_kernels: tuple = ((1, 7), (2, 7))
    conv1d_channels: tuple = (64, 128, 128, 128)
    conv1d_kernel: int = 7
    window_pool: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        self.conv2d_channels = tuple(int(c) for c in self.conv2d_channels)
        self.conv2d_kernels = tuple(tuple(int(k) for k in ks) for ks in self.conv2d_kernels)
        self.conv1d_channels = tuple(int(c) for c in self.conv1d_channels)
        if self.eta < 2:
            raise ValueError("eta must be >= 2")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if len(self.conv2d_channels) != len(self.conv2d_kernels):
            raise ValueError(
                f"{len(self.conv2d_channels)} conv2d channel widths but "
                f"{len(self.conv2d_kernels)} kernels"
            )
        if not self.conv2d_channels or not self.conv1d_channels:
            raise ValueError("need at least one 2D and one 1D block")
        if any(kh > 2 for kh, _ in self.conv2d_kernels):
            raise ValueError("2D kernel height cannot exceed the 2-row direction axis")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        TafConfig(self.rho, self.theta_ms)

    @property
    def taf(self) -> TafConfig:
        return TafConfig(self.rho, self.theta_ms)

    def to_dict(self):
        d = asdict(self)
        d["conv2d_kernels"] = [list(k) for k in self.conv2d_kernels]
        return d


class Block2d(nn.Sequential):
    def __init__(self, cin, cout, kernel, dropout):
        kh, kw = kernel
        # explicit "same" padding; even kernels get the extra row/column at the end
        pad = ((kw - 1) // 2, kw // 2, (kh - 1) // 2, kh // 2)
        super().__init__(
            nn.ZeroPad2d(pad),
            nn.Conv2d(cin, cout, kernel),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout),
        )


class ResBlock1d(nn.Module):
    def __init__(self, cin, cout, kernel, dropout):
        super().__init__()
        self.conv1 = nn.Conv1d(cin, cout, kernel, padding="same")
        self.bn1 = nn.BatchNorm1d(cout)
        self.conv2 = nn.Conv1d(cout, cout, kernel, padding="same")
        self.bn2 = nn.BatchNorm1d(cout)
        self.skip = nn.Conv1d(cin, cout, 1) if cin != cout else nn.Identity()
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        y = self.drop(F.relu(self.bn1(self.conv1(x))))
        y = self.bn2(self.conv2(y))
        return F.relu(y + self.skip(x))


class TafEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        blocks2d = []
        cin = 3
        for i, (cout, kernel) in enumerate(zip(cfg.conv2d_channels, cfg.conv2d_kernels)):
            blocks2d.append(Block2d(cin, cout, kernel, cfg.dropout))
            if i == 0 and cfg.window_pool > 1:
                blocks2d.append(nn.MaxPool2d((1, cfg.window_pool)))
            cin = cout
        self.blocks2d = nn.Sequential(*blocks2d)
        self.direction_pool = nn.MaxPool2d((2, 1))
        blocks1d = []
        for i, cout in enumerate(cfg.conv1d_channels):
            blocks1d.append(ResBlock1d(cin, cout, cfg.conv1d_kernel, cfg.dropout))
            if i < len(cfg.conv1d_channels) - 1:
                blocks1d.append(nn.MaxPool1d(2, ceil_mode=True))
            cin = cout
        self.blocks1d = nn.Sequential(*blocks1d)
        self.head = nn.Linear(cin, cfg.eta)

    def forward(self, x):
        x = torch.log1p(x)
        x = self.direction_pool(self.blocks2d(x)).squeeze(2)
        x = self.blocks1d(x)
        x = F.adaptive_avg_pool1d(x, 1).squeeze(-1)
        return F.normalize(self.head(x), dim=1, eps=1e-12)


@dataclass
class EncoderModel:
    """A network plus its configuration and training metadata."""

    net: TafEncoder
    config: EncoderConfig
    metadata: dict = field(default_factory=dict)

    @property
    def eta(self) -> int:
        return self.config.eta

    def _check(self, X):
        X = np.asarray(X, dtype=np.float32)
        expected = (3, 2, self.config.rho)
        if X.shape[-3:] != expected or X.ndim not in (3, 4):
            raise ValueError(f"expected TAF input of shape {expected} or (N, *{expected}), got {X.shape}")
        return X

    def embed(self, X, batch_size=256) -> np.ndarray:
        """Unit-norm embeddings; ``X`` is one TAF tensor or a batch."""
        X = self._check(X)
        single = X.ndim == 3
        if single:
            X = X[None]
        self.net.eval()
        out = np.empty((len(X), self.eta), dtype=np.float32)
        with torch.no_grad():
            for start in range(0, len(X), batch_size):
                chunk = torch.from_numpy(np.ascontiguousarray(X[start:start + batch_size]))
                out[start:start + len(chunk)] = self.net(chunk).numpy()
        return out[0] if single else out

    def embed_traces(self, traces, batch_size=256) -> np.ndarray:
        return self.embed(TafTransformer(self.config.rho, self.config.theta_ms).transform(traces), batch_size)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "metadata": self.metadata,
        }
        arrays = {k: v.detach().cpu().numpy() for k, v in self.net.state_dict().items()}
        buf = io.BytesIO()
        np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
        path.write_bytes(buf.getvalue())
        return path

    @classmethod
    def load(cls, path) -> "EncoderModel":
        with np.load(Path(path), allow_pickle=False) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
            cfg = EncoderConfig(**meta["config"])
            net = TafEncoder(cfg)
            state = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != "__meta__"}
        net.load_state_dict(state)
        net.eval()
        return cls(net, cfg, meta.get("metadata", {}))


def build_encoder(cfg: EncoderConfig = EncoderConfig(), seed: int = 0) -> EncoderModel:
    torch.manual_seed(seed)
    net = TafEncoder(cfg)
    net.eval()
    return EncoderModel(net, cfg, {"seed": seed, "epochs": 0})


def embed(model: EncoderModel, x) -> np.ndarray:
    return model.embed(x)


# ---------------------------------------------------------------------------
# supervised contrastive loss


@dataclass
class ContrastiveBatch:
    indices: np.ndarray
    labels: np.ndarray
    z: object = None

    def positives(self, i) -> np.ndarray:
        same = self.labels == self.labels[i]
        same[i] = False
        return np.flatnonzero(same)

    def negatives(self, i) -> np.ndarray:
        return np.flatnonzero(self.labels != self.labels[i])


def _label_codes(labels):
    if isinstance(labels, torch.Tensor):
        return labels
    _, codes = np.unique(np.asarray(labels), return_inverse=True)
    return torch.as_tensor(codes)


def scl_loss(z: torch.Tensor, labels, gamma: float = 0.1) -> torch.Tensor:
    """Mean over anchors of the supervised contrastive loss.

    For anchor ``i`` with positives ``P(i)`` and negatives ``N(i)``::

        L_i = -1/|P(i)| * sum_p log( exp(z_i.z_p / gamma) / sum_n exp(z_i.z_n / gamma) )

    The denominator runs over negatives only.  Anchors lacking a positive or
    a negative are left out of the mean.
    """
    codes = _label_codes(labels).to(z.device)
    n = z.shape[0]
    sim = z @ z.T / gamma
    same = codes[:, None] == codes[None, :]
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    pos = same & ~eye
    neg = ~same
    n_pos = pos.sum(1)
    valid = (n_pos > 0) & (neg.sum(1) > 0)
    if not bool(valid.any()):
        raise ValueError("no anchor in the batch has both a positive and a negative")
    log_den = torch.logsumexp(sim.masked_fill(~neg, float("-inf")), dim=1)
    pos_mean = (sim * pos).sum(1) / n_pos.clamp(min=1)
    per_anchor = log_den - pos_mean
    return per_anchor[valid].mean()


def make_batches(labels: Sequence, batch_size: int = 64, seed: int = 0, per_site: int = 4,
                 num_batches=None) -> Iterator[ContrastiveBatch]:
    """Class-balanced batches of ``batch_size // per_site`` sites x ``per_site`` items.

    Each site's members are consumed from a reshuffled queue so one epoch
    (``ceil(N / batch_size)`` batches by default) visits every item about once.
    """
    labels = np.asarray(labels)
    sites = np.unique(labels)
    if len(sites) < 2:
        raise ValueError("contrastive batches need at least two sites")
    rng = np.random.default_rng(seed)
    members = {s: np.flatnonzero(labels == s) for s in sites}
    queues = {s: [] for s in sites}
    per_site = max(2, min(per_site, batch_size // 2))
    k = max(2, min(len(sites), batch_size // per_site))
    if num_batches is None:
        num_batches = math.ceil(len(labels) / (k * per_site))

    def draw(site, m):
        out = []
        while len(out) < m:
            if not queues[site]:
                queues[site] = list(rng.permutation(members[site]))
            out.append(queues[site].pop())
        return out

    for _ in range(num_batches):
        chosen = rng.choice(sites, size=k, replace=False)
        idx = np.array([i for s in chosen for i in draw(s, per_site)])
        yield ContrastiveBatch(idx, labels[idx])


def train_encoder(
    data,
    cfg: EncoderConfig = EncoderConfig(),
    epochs: int = 30,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 64,
    per_site: int = 4,
    labels=None,
    log_every: int = 0,
) -> EncoderModel:
    """Train an encoder on an (augmented) dataset or a precomputed TAF array.

    ``data`` is a :class:`Dataset` or an array of shape ``(N, 3, 2, rho)``
    together with ``labels``.
    """
    if isinstance(data, Dataset):
        traces = [t for t in data.traces if t.is_monitored]
        X = TafTransformer(cfg.rho, cfg.theta_ms).transform(traces)
        labels = [t.label for t in traces]
    else:
        X = np.asarray(data, dtype=np.float32)
        if labels is None:
            raise ValueError("labels are required with an array input")
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("training needs at least two sites")
    model = build_encoder(cfg, seed)
    net = model.net
    torch.manual_seed(seed)
    X_t = torch.from_numpy(np.ascontiguousarray(X, dtype=np.float32))
    steps_per_epoch = math.ceil(len(labels) / (max(2, batch_size // per_site) * per_site))
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, epochs * steps_per_epoch))
    history = []
    for epoch in range(epochs):
        net.train()
        total, count = 0.0, 0
        for batch in make_batches(labels, batch_size, seed * 100003 + epoch, per_site, steps_per_epoch):
            z = net(X_t[batch.indices])
            loss = scl_loss(z, batch.labels, cfg.gamma)
            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss {loss.item()} at epoch {epoch}; "
                    f"embedding norms {z.norm(dim=1).min().item():.3g}..{z.norm(dim=1).max().item():.3g}, "
                    f"lr {sched.get_last_lr()[0]:.3g}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(batch.indices)
            count += len(batch.indices)
        history.append(total / count)
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("epoch %d/%d loss %.4f", epoch + 1, epochs, history[-1])
    net.eval()
    model.metadata = {
        "seed": seed,
        "epochs": epochs,
        "lr": lr,
        "batch_size": batch_size,
        "final_loss": history[-1] if history else None,
        "loss_history": history,
    }
    return model
