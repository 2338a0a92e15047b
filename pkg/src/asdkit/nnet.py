"""Compact CNN encoder with product-ID and norm heads, AdamW + one-cycle training machinery, checkpoints."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

CHECKPOINT_FORMAT = "asdkit-checkpoint"
CHECKPOINT_VERSION = 1

DEFAULT_BLOCKS = ((16, 3, 2), (32, 3, 2), (64, 3, 2), (128, 3, 2))
DESK_BLOCKS = ((8, 3, 2), (16, 3, 2), (32, 3, 2), (64, 3, 2))

_ACTIVATIONS = {"relu": nn.ReLU, "gelu": nn.GELU, "silu": nn.SiLU, "tanh": nn.Tanh}


class CheckpointError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    conv_blocks: tuple = DEFAULT_BLOCKS
    embedding_dim: int = 128
    activation: str = "relu"
    head_hidden: int = 256
    n_frames: int = 118
    n_mels: int = 224

    def __post_init__(self):
        object.__setattr__(self, "conv_blocks", tuple(tuple(int(v) for v in b) for b in self.conv_blocks))
        if not self.conv_blocks:
            raise ValueError("encoder needs at least one conv block")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_blocks"] = [list(b) for b in self.conv_blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class Encoder(nn.Module):
    """Conv blocks, global average pooling, then two dense transforms to the embedding."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        act = _ACTIVATIONS[cfg.activation]
        layers = []
        in_ch = 1
        for channels, kernel, stride in cfg.conv_blocks:
            layers += [nn.Conv2d(in_ch, channels, kernel, stride, padding=kernel // 2), act()]
            in_ch = channels
        self.conv = nn.Sequential(*layers)
        self.fc1 = nn.Linear(in_ch, cfg.head_hidden)
        self.act = act()
        self.fc2 = nn.Linear(cfg.head_hidden, cfg.embedding_dim)

    def forward(self, x):
        h = self.conv(x).mean(dim=(2, 3))
        return self.fc2(self.act(self.fc1(h)))


class OENetwork(nn.Module):
    """Encoder plus the two heads.

    ``forward`` returns ``(embeddings, product_probs, machine_probs)`` where
    the product head is a logistic-squashed linear map of the embedding and
    the machine head squashes an affine function of the squared embedding
    norm.
    """

    def __init__(self, cfg: EncoderConfig, n_ids: int):
        super().__init__()
        self.cfg = cfg
        self.n_ids = n_ids
        self.encoder = Encoder(cfg)
        self.product = nn.Linear(cfg.embedding_dim, n_ids)
        # (a, b) in sigmoid(a * |e|^2 + b)
        self.norm_affine = nn.Parameter(torch.zeros(2))

    def check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 3:
            x = x.unsqueeze(1)
        if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != (self.cfg.n_frames, self.cfg.n_mels):
            raise ValueError(
                f"expected input (N, {self.cfg.n_frames}, {self.cfg.n_mels}), got {tuple(x.shape)}"
            )
        return x

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(self.check_input(x))

    def heads(self, e: torch.Tensor):
        product_probs = torch.sigmoid(self.product(e))
        sq_norm = (e * e).sum(dim=1)
        machine_probs = torch.sigmoid(self.norm_affine[0] * sq_norm + self.norm_affine[1])
        return product_probs, machine_probs

    def forward(self, x):
        e = self.embed(x)
        product_probs, machine_probs = self.heads(e)
        return e, product_probs, machine_probs


def build_network(cfg: EncoderConfig, n_ids: int, seed: int = 0, dtype=torch.float32) -> OENetwork:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    net = OENetwork(cfg, n_ids).to(dtype)
    torch.random.set_rng_state(gen_state)
    return net


def gradients(model: nn.Module) -> dict:
    """Current parameter gradients as numpy arrays; raises if backward has not run."""
    out = {}
    for name, p in model.named_parameters():
        if p.grad is None:
            raise RuntimeError(f"no gradient for {name}; run forward and backward first")
        out[name] = p.grad.detach().cpu().numpy().copy()
    return out


# ---------------------------------------------------------------------------
# Optimization


def one_cycle_lr(step: int, total_steps: int, max_lr: float, pct_start: float = 0.3,
                 div_factor: float = 25.0, final_div_factor: float = 1e4) -> float:
    """Cosine one-cycle learning rate at ``step`` (0-based)."""
    if total_steps < 1:
        raise ValueError("total_steps must be positive")
    initial = max_lr / div_factor
    final = initial / final_div_factor
    peak_step = float(pct_start * total_steps) - 1
    last_step = total_steps - 1
    if step <= peak_step:
        start, end, frac = initial, max_lr, step / peak_step if peak_step > 0 else 1.0
    else:
        span = last_step - peak_step
        start, end, frac = max_lr, final, (step - peak_step) / span if span > 0 else 1.0
    frac = min(max(frac, 0.0), 1.0)
    return end + (start - end) / 2.0 * (math.cos(math.pi * frac) + 1.0)


@dataclass
class OptimState:
    max_lr: float
    total_steps: int
    weight_decay: float = 0.01
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    betas: tuple = (0.9, 0.999)
    step: int = 0
    lr_history: list = field(default_factory=list)

    def lr_at(self, step: int) -> float:
        return one_cycle_lr(step, self.total_steps, self.max_lr, self.pct_start, self.div_factor, self.final_div_factor)


class OneCycleAdamW:
    """AdamW with decoupled weight decay whose learning rate follows the one-cycle curve per step."""

    def __init__(self, model: nn.Module, state: OptimState):
        self.model = model
        self.state = state
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=state.lr_at(0), betas=state.betas, weight_decay=state.weight_decay
        )

    @property
    def lr(self) -> float:
        return self.state.lr_at(min(self.state.step, self.state.total_steps - 1))

    def zero_grad(self):
        self.optimizer.zero_grad(set_to_none=False)

    def step(self):
        for name, p in self.model.named_parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                bad = int((~torch.isfinite(p.grad)).sum())
                raise NonFiniteGradientError(f"non-finite gradient in {name} ({bad} entries) at step {self.state.step}")
        lr = self.lr
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        self.state.lr_history.append(lr)
        self.state.step += 1
        return lr

    def moment_tensors(self) -> dict:
        names = {id(p): n for n, p in self.model.named_parameters()}
        out = {}
        for p, st in self.optimizer.state.items():
            name = names[id(p)]
            out[f"optim/{name}/exp_avg"] = st["exp_avg"]
            out[f"optim/{name}/exp_avg_sq"] = st["exp_avg_sq"]
            out[f"optim/{name}/step"] = torch.as_tensor(st["step"]).reshape(1).to(torch.float64)
        return out

    def load_moments(self, tensors: dict):
        for name, p in self.model.named_parameters():
            key = f"optim/{name}"
            if f"{key}/exp_avg" not in tensors:
                continue
            self.optimizer.state[p] = {
                "exp_avg": tensors[f"{key}/exp_avg"].clone(),
                "exp_avg_sq": tensors[f"{key}/exp_avg_sq"].clone(),
                "step": tensors[f"{key}/step"].reshape(()).to(torch.float32).clone(),
            }


# ---------------------------------------------------------------------------
# Checkpoints: raw little-endian tensor blob plus a JSON header


def _header_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_checkpoint(path, model: OENetwork, optim: OneCycleAdamW | None = None, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    if optim is not None:
        tensors.update(optim.moment_tensors())
    entries = []
    offset = 0
    with open(path, "wb") as fh:
        for name in sorted(tensors):
            arr = tensors[name].detach().cpu().numpy()
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = np.ascontiguousarray(arr).tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "encoder_config": model.cfg.to_dict(),
        "config_hash": model.cfg.hash(),
        "n_ids": model.n_ids,
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "tensors": entries,
        "blob_sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
        "optimizer": None if optim is None else {
            k: v for k, v in asdict(optim.state).items() if k != "lr_history"
        },
        "meta": meta or {},
    }
    _header_path(path).write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    return path


def read_checkpoint_header(path) -> dict:
    path = Path(path)
    try:
        header = json.loads(_header_path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint header for {path}: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format/version in {path}")
    return header


def load_checkpoint(path, expected_config: EncoderConfig | None = None, with_optimizer: bool = False):
    """Restore a network (and optionally its optimizer) from ``path``.

    Returns ``(model, header)`` or ``(model, optim, header)``.
    """
    path = Path(path)
    header = read_checkpoint_header(path)
    cfg = EncoderConfig.from_dict(header["encoder_config"])
    if cfg.hash() != header["config_hash"]:
        raise CheckpointError(f"config hash mismatch inside {path}")
    if expected_config is not None and expected_config.hash() != header["config_hash"]:
        raise CheckpointError(
            f"checkpoint {path} was built for encoder config {header['config_hash']}, expected {expected_config.hash()}"
        )
    blob = path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise CheckpointError(f"checkpoint blob {path} does not match its header")
    tensors = {}
    for e in header["tensors"]:
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=int)), offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    dtype = getattr(torch, header["dtype"])
    model = OENetwork(cfg, header["n_ids"]).to(dtype)
    model.load_state_dict({k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")})
    model.eval()
    if not with_optimizer:
        return model, header
    if header["optimizer"] is None:
        raise CheckpointError(f"checkpoint {path} has no optimizer state")
    ost = dict(header["optimizer"])
    ost["betas"] = tuple(ost["betas"])
    optim = OneCycleAdamW(model, OptimState(**ost))
    optim.load_moments({k: v for k, v in tensors.items() if k.startswith("optim/")})
    return model, optim, header
