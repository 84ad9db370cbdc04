"""Self-supervised training, inference and checkpoints for the snow-mask network."""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import losses as L
from ..core import PointCloud
from ..pseudolabel import PseudoLabelConfig, run as run_pseudolabel
from ..rangeproj import OverflowPolicy, normalize_channels, project, unproject_mask
from ..spatialindex import NeighborIndex
from . import autograd as ag
from .layers import Module
from .models import NetConfig, SnowNet

CKPT_MAGIC = b"LIORNETC"
CKPT_VERSION = 1


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-3
    momentum: float = 0.9
    crop_h: int = 16
    crop_w: int = 256
    max_steps: int = 0
    seed: int = 0


@dataclass(eq=False)
class Sample:
    """Pixel-aligned training inputs and targets for one scan."""

    image: np.ndarray        # (3, H, W) normalised channels
    valid: np.ndarray        # (H, W)
    target: np.ndarray       # final pseudo-label at each pixel
    cond1: np.ndarray        # intensity candidates (scope of the reflectivity term)
    edges: np.ndarray
    intensity: np.ndarray    # raw geometry of the pixel's point
    range_m: np.ndarray
    z: np.ndarray
    knn_dist: np.ndarray     # mean k-NN distance for candidate pixels, inf elsewhere
    mount_height_m: float

    def crop(self, r0, c0, h, w) -> "Sample":
        sl = (slice(r0, r0 + h), slice(c0, c0 + w))
        return Sample(self.image[(slice(None),) + sl], self.valid[sl], self.target[sl], self.cond1[sl],
                      self.edges[sl], self.intensity[sl], self.range_m[sl], self.z[sl],
                      self.knn_dist[sl], self.mount_height_m)


def prepare_sample(cloud: PointCloud, pl_cfg: PseudoLabelConfig, k: int) -> Sample:
    """Project a scan and attach pseudo-labels, edges and neighbour statistics."""
    index = NeighborIndex(cloud.xyz)
    trace = run_pseudolabel(cloud, pl_cfg, index=index)
    img = trace.image
    image, _ = normalize_channels(img)
    cond1_px = img.gather(trace.stages["cond1"], fill=False)
    knn = np.full(img.shape, np.inf)
    cand_idx = img.index_map[cond1_px & img.valid]
    if len(cand_idx):
        knn[cond1_px & img.valid] = index.mean_knn_distance(k, members=cand_idx)
    return Sample(
        image=image,
        valid=img.valid.copy(),
        target=img.gather(trace.labels.labels, fill=0).astype(np.float64),
        cond1=cond1_px,
        edges=trace.edges & img.valid,
        intensity=img.intensity_ch.copy(),
        range_m=img.range_ch.copy(),
        z=img.gather(cloud.xyz[:, 2].astype(np.float64), fill=0.0),
        knn_dist=knn,
        mount_height_m=cloud.meta.mount_height_m,
    )


def stack(samples) -> dict:
    """Batch samples into (B, 1, H, W) masks and a (B, 3, H, W) input."""
    def s(name):
        return np.stack([getattr(x, name) for x in samples])[:, None]
    return {
        "image": np.stack([x.image for x in samples]),
        **{k: s(k) for k in ("valid", "target", "cond1", "edges", "intensity", "range_m", "z", "knn_dist")},
        "mount_height_m": samples[0].mount_height_m,
    }


@dataclass(eq=False)
class TrainState:
    net: SnowNet
    log_sigma: ag.Tensor
    velocity: dict = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    seed: int = 0

    @classmethod
    def create(cls, net_cfg: NetConfig, seed: int = 0) -> "TrainState":
        net = SnowNet(net_cfg, seed=seed)
        return cls(net=net, log_sigma=ag.Tensor(np.zeros(L.N_TERMS), requires_grad=True), seed=seed)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.net.parameters())


def compute_terms(net: SnowNet, batch: dict, loss_cfg: L.LossConfig):
    """Forward pass plus the five loss terms (aux heads folded into the first)."""
    main, aux = net(batch["image"])
    probs = ag.sigmoid(main)
    valid = batch["valid"]
    target = batch["target"]
    l1 = L.intensity_loss(probs, target, valid)
    if aux:
        aux_terms = [L.bce(ag.sigmoid(a), target, valid) for a in aux]
        aux_mean = aux_terms[0]
        for t in aux_terms[1:]:
            aux_mean = aux_mean + t
        l1 = l1 + aux_mean * (1.0 / len(aux_terms))
    region = batch["cond1"] if loss_cfg.reflectivity_scoped else None
    l2 = L.reflectivity_loss(probs, target, valid, region=region)
    l3 = L.edge_loss(main, batch["edges"])
    cand = batch["cond1"] & valid
    l4 = L.sparsity_loss(probs.data, cand, batch["knn_dist"])
    l5 = L.penalty_loss(probs, batch["intensity"], batch["range_m"], batch["z"],
                        batch["mount_height_m"], loss_cfg, valid)
    return [l1, l2, l3, l4, l5], main


def train_step(state: TrainState, batch: dict, loss_cfg: L.LossConfig, train_cfg: TrainConfig):
    """One optimisation step; returns ``(state, total, term_values)``.

    The state is updated in place (momentum SGD on the network and, when
    uncertainty weighting is active, on the log-variances).
    """
    net = state.net
    net.train()
    net.zero_grad()
    state.log_sigma.grad = None
    terms, _ = compute_terms(net, batch, loss_cfg)
    values = [float(t.data) for t in terms]
    for name, v in zip(L.TERM_NAMES, values):
        if not np.isfinite(v):
            raise NonFiniteLoss(f"step {state.step}: {name} loss is {v}")
    learned = loss_cfg.uncertainty_mode == L.LEARNED and state.epoch >= loss_cfg.uncertainty_start_epoch
    total = L.total_loss(terms, loss_cfg.lambdas, state.log_sigma if learned else None)
    if not np.isfinite(total.data):
        raise NonFiniteLoss(f"step {state.step}: total loss is {float(total.data)}")
    if total.requires_grad:
        total.backward()
    params = list(net.named_parameters())
    if learned:
        params.append(("log_sigma", state.log_sigma))
    for name, p in params:
        if p.grad is None:
            continue
        v = state.velocity.get(name)
        v = p.grad.copy() if v is None else train_cfg.momentum * v + p.grad
        state.velocity[name] = v
        p.data = p.data - train_cfg.lr * v
    state.step += 1
    return state, float(total.data), values


def random_crop(sample: Sample, rng, h, w) -> Sample:
    H, W = sample.valid.shape
    if h > H or w > W:
        raise ValueError(f"crop {(h, w)} larger than image {(H, W)}")
    r0 = int(rng.integers(0, H - h + 1))
    c0 = int(rng.integers(0, W - w + 1))
    return sample.crop(r0, c0, h, w)


def train(state: TrainState, samples, loss_cfg: L.LossConfig, train_cfg: TrainConfig, log=None):
    """Run epochs of seeded shuffled mini-batches; returns per-epoch log rows.

    Each row holds ``epoch``, the mean of each term, the log-variances at the
    end of the epoch and the mean total.
    """
    rng = np.random.default_rng(train_cfg.seed)
    rows = []
    for _ in range(train_cfg.epochs):
        order = rng.permutation(len(samples))
        sums = np.zeros(L.N_TERMS)
        total_sum, n = 0.0, 0
        for start in range(0, len(order), train_cfg.batch_size):
            if train_cfg.max_steps and state.step >= train_cfg.max_steps:
                break
            chunk = [random_crop(samples[i], rng, train_cfg.crop_h, train_cfg.crop_w)
                     for i in order[start:start + train_cfg.batch_size]]
            _, total, values = train_step(state, stack(chunk), loss_cfg, train_cfg)
            sums += values
            total_sum += total
            n += 1
        if n == 0:
            break
        row = {"epoch": state.epoch, **{f"L{i + 1}": sums[i] / n for i in range(L.N_TERMS)},
               **{f"log_sigma{i + 1}": float(state.log_sigma.data[i]) for i in range(L.N_TERMS)},
               "total": total_sum / n, "steps": state.step}
        rows.append(row)
        if log is not None:
            log(row)
        state.epoch += 1
    return rows


def format_log(rows) -> str:
    cols = ["epoch"] + [f"L{i}" for i in range(1, 6)] + [f"log_sigma{i}" for i in range(1, 6)] + ["total"]
    lines = ["\t".join(cols)]
    for row in rows:
        lines.append("\t".join(str(row["epoch"]) if c == "epoch" else repr(float(row[c])) for c in cols))
    return "\n".join(lines) + "\n"


# inference --------------------------------------------------------------------

def cast(net: SnowNet, dtype) -> SnowNet:
    """Deep copy of ``net`` with parameters and buffers in ``dtype``."""
    out = copy.deepcopy(net)
    for p in out.parameters():
        p.data = p.data.astype(dtype)
    for m in out.modules():
        for key, value in vars(m).items():
            if isinstance(value, np.ndarray):
                setattr(m, key, value.astype(dtype))
    return out


def predict_image(net: SnowNet, image: np.ndarray) -> np.ndarray:
    """Eval-mode snow probabilities for a (3, H, W) input, padding to the net's stride."""
    step = 2 ** net.cfg.depth
    _, H, W = image.shape
    ph, pw = (-H) % step, (-W) % step
    x = np.pad(image, ((0, 0), (0, ph), (0, pw)))[None]
    dtype = next(iter(net.parameters())).data.dtype
    net.eval()
    main, _ = net(x.astype(dtype))
    return ag.sigmoid_np(main.data[0, 0, :H, :W])


def infer(net: SnowNet, cloud: PointCloud, policy=OverflowPolicy.INHERIT, dtype=np.float32) -> np.ndarray:
    """Per-point snow probabilities: project, normalise, forward, sigmoid, unproject."""
    img = project(cloud)
    image, _ = normalize_channels(img)
    model = net if dtype is None else cast(net, dtype)
    probs = predict_image(model, image)
    out = unproject_mask(img, probs, overflow_policy=policy)
    return out if dtype is None else out.astype(dtype)


# checkpoints ------------------------------------------------------------------

def _blobs(state: TrainState):
    yield from state.net.named_parameters()
    for name, buf in state.net.named_buffers():
        yield name, buf
    yield "log_sigma", state.log_sigma


def save_checkpoint(state: TrainState, path) -> None:
    fp = state.net.fingerprint().encode()
    items = list(_blobs(state))
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), fp,
           struct.pack("<III", state.epoch, state.step, len(items))]
    for name, value in items:
        arr = np.asarray(getattr(value, "data", value), dtype="<f8")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path, net_cfg: NetConfig) -> TrainState:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    fp = raw[12:76].decode()
    state = TrainState.create(net_cfg)
    if fp != state.net.fingerprint():
        raise ValueError(f"{path}: architecture fingerprint mismatch for {net_cfg}")
    epoch, step, count = struct.unpack_from("<III", raw, 76)
    pos = 88
    targets = dict(_blobs(state))
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        name = raw[pos + 2:pos + 2 + nlen].decode()
        pos += 2 + nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        shape = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
        pos += 1 + 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
        dest = targets[name]
        if isinstance(dest, ag.Tensor):
            dest.data = arr
        else:
            dest[...] = arr
    state.epoch, state.step = epoch, step
    return state


def module_state(module: Module) -> dict:
    """Snapshot of parameter values (copies) keyed by name."""
    return {n: p.data.copy() for n, p in module.named_parameters()}
