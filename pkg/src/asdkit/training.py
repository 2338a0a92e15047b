"""Outlier-exposure embedding training as a scikit-learn style estimator."""

from __future__ import annotations

import logging

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .features import MelConfig, random_crop
from .nnet import DEFAULT_BLOCKS, EncoderConfig, OneCycleAdamW, OptimState, build_network
from .objective import BalancedBatchSampler, BatchLabels, loss_machine, loss_product, mixup_batch

logger = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def batch_losses(product_probs, machine_probs, labels: BatchLabels, lam: float, loss_arm: str = "full"):
    """Product-ID loss, machine-type loss and the combined training loss, evaluated in float64."""
    lp = loss_product(product_probs.double(), labels.t, labels.y)
    lm = loss_machine(machine_probs.double(), labels.t)
    total = lam * lp if loss_arm == "ids_only" else lm + lam * lp
    return lp, lm, total


class OEEncoder(TransformerMixin, BaseEstimator):
    """Train an embedding network for one target machine type.

    ``fit`` takes whole-clip log-mel matrices for the target machine and for
    every other machine type; the other types act as pseudo-anomalies. After
    fitting, ``transform`` maps (n, frames, n_mels) segments to embeddings.

    Parameters
    ----------
    target : str
        Target machine type.
    n_ids : int
        Number of product IDs of the target machine.
    lr, batch_size, lam, epochs : training hyperparameters (``lam`` weights the product-ID loss)
    use_mixup, mixup_alpha : within-batch mixup switch and Beta parameter
    loss_arm : "full" (machine + lam * product) or "ids_only" (lam * product)
    conv_blocks, head_hidden, activation : encoder shape
    weight_decay : AdamW decoupled weight decay
    segment_s : training crop length in seconds
    dtype : "float32" or "float64"
    seed : int
    """

    def __init__(self, target="", n_ids=2, lr=1e-3, batch_size=32, lam=1.0, epochs=30, use_mixup=True,
                 mixup_alpha=0.2, loss_arm="full", conv_blocks=DEFAULT_BLOCKS, head_hidden=256,
                 activation="relu", weight_decay=0.01, segment_s=2.0, dtype="float32", seed=0):
        self.target = target
        self.n_ids = n_ids
        self.lr = lr
        self.batch_size = batch_size
        self.lam = lam
        self.epochs = epochs
        self.use_mixup = use_mixup
        self.mixup_alpha = mixup_alpha
        self.loss_arm = loss_arm
        self.conv_blocks = conv_blocks
        self.head_hidden = head_hidden
        self.activation = activation
        self.weight_decay = weight_decay
        self.segment_s = segment_s
        self.dtype = dtype
        self.seed = seed

    def encoder_config(self, n_mels: int = 224) -> EncoderConfig:
        mel = MelConfig(segment_s=self.segment_s, n_mels=n_mels)
        return EncoderConfig(conv_blocks=self.conv_blocks, head_hidden=self.head_hidden, activation=self.activation,
                             n_frames=mel.segment_frames, n_mels=n_mels)

    def _crop_batch(self, clips, idx, rng):
        mel = MelConfig(segment_s=self.segment_s, n_mels=clips[0].shape[1])
        return np.stack([random_crop(clips[i], self.segment_s, rng, mel).values for i in idx])

    def _validation_set(self, clips, machine_types, product_ids, rng):
        machine_types = np.asarray(machine_types)
        target = np.flatnonzero(machine_types == self.target)
        other = np.flatnonzero(machine_types != self.target)
        if target.size == 0:
            return None
        if other.size:
            other = np.sort(rng.choice(other, size=min(other.size, target.size), replace=False))
        idx = np.concatenate([target, other]).astype(int)
        x = self._crop_batch(clips, idx, rng)
        labels = BatchLabels.from_ids(machine_types[idx] == self.target, np.asarray(product_ids)[idx], self.n_ids)
        return x, labels

    def _evaluate(self, x, labels):
        net = self.network_
        net.eval()
        with torch.no_grad():
            _, pp, mp = net(torch.as_tensor(x, dtype=_DTYPES[self.dtype]))
            lp, lm, total = batch_losses(pp, mp, labels, self.lam, self.loss_arm)
        return float(lp), float(lm), float(total)

    def fit(self, clips, machine_types, product_ids, val_clips=None, val_machine_types=None, val_product_ids=None,
            on_epoch=None):
        """Train with the 1:1 sampler, optional mixup and the one-cycle AdamW schedule.

        The weights of the epoch with the smallest validation loss are kept
        (smallest mean training loss when no validation clips are given).
        """
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.loss_arm not in ("full", "ids_only"):
            raise ValueError(f"unknown loss_arm {self.loss_arm!r}")
        machine_types = np.asarray(machine_types)
        product_ids = np.asarray(product_ids, dtype=int)
        if len(clips) != len(machine_types) or len(clips) != len(product_ids):
            raise ValueError("clips, machine_types and product_ids must align")
        n_mels = clips[0].shape[1]
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.manual_seed(self.seed)
        rng = np.random.default_rng([self.seed, 17])
        sampler = BalancedBatchSampler(machine_types, product_ids, self.target, self.batch_size,
                                       np.random.default_rng([self.seed, 23]))
        steps_per_epoch = sampler.batches_per_epoch()
        cfg = self.encoder_config(n_mels)
        net = build_network(cfg, self.n_ids, seed=self.seed, dtype=_DTYPES[self.dtype])
        self.network_ = net
        optim = OneCycleAdamW(net, OptimState(max_lr=self.lr, total_steps=self.epochs * steps_per_epoch,
                                              weight_decay=self.weight_decay))
        val = None
        if val_clips is not None and len(val_clips):
            val = self._validation_set(val_clips, val_machine_types, val_product_ids, np.random.default_rng([self.seed, 29]))

        history, epoch_log = [], []
        best_loss, best_state, best_epoch = np.inf, None, -1
        for epoch in range(self.epochs):
            net.train()
            totals = []
            for idx in sampler.epoch():
                x = self._crop_batch(clips, idx, rng)
                labels = BatchLabels.from_ids(machine_types[idx] == self.target, product_ids[idx], self.n_ids)
                if self.use_mixup:
                    x, labels = mixup_batch(x, labels, rng, self.mixup_alpha)
                _, pp, mp = net(torch.as_tensor(x, dtype=_DTYPES[self.dtype]))
                lp, lm, total = batch_losses(pp, mp, labels, self.lam, self.loss_arm)
                optim.zero_grad()
                total.backward()
                lr = optim.step()
                rec = {"epoch": epoch, "step": optim.state.step - 1, "lr": lr, "lp": lp.item(), "lm": lm.item(),
                       "total": total.item(), "fractional_labels": labels.is_fractional()}
                history.append(rec)
                totals.append(rec["total"])
            train_loss = float(np.mean(totals))
            if val is not None:
                v_lp, v_lm, v_total = self._evaluate(*val)
            else:
                v_lp = v_lm = float("nan")
                v_total = train_loss
            epoch_log.append({"epoch": epoch, "train_total": train_loss, "val_lp": v_lp, "val_lm": v_lm,
                              "val_total": v_total})
            logger.info("epoch %d train %.5f val %.5f", epoch, train_loss, v_total)
            if v_total < best_loss:
                best_loss, best_epoch = v_total, epoch
                best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
            if on_epoch is not None:
                on_epoch(epoch_log[-1])
        net.load_state_dict(best_state)
        net.eval()
        self.optim_ = optim
        self.history_ = history
        self.epoch_log_ = epoch_log
        self.best_epoch_ = best_epoch
        self.best_loss_ = float(best_loss)
        return self

    @classmethod
    def from_network(cls, network, **params) -> "OEEncoder":
        """Wrap an already trained network (for instance one restored from a checkpoint)."""
        enc = cls(n_ids=network.n_ids, conv_blocks=network.cfg.conv_blocks, head_hidden=network.cfg.head_hidden,
                  activation=network.cfg.activation,
                  dtype=str(next(network.parameters()).dtype).replace("torch.", ""), **params)
        enc.network_ = network.eval()
        return enc

    def _run(self, segments, batch: int = 64):
        check_is_fitted(self, "network_")
        net = self.network_
        net.eval()
        dtype = next(net.parameters()).dtype
        segments = np.asarray(segments)
        outs = ([], [], [])
        with torch.no_grad():
            for s in range(0, len(segments), batch):
                res = net(torch.as_tensor(segments[s : s + batch], dtype=dtype))
                for o, r in zip(outs, res):
                    o.append(r.double().numpy())
        if not len(segments):
            return np.zeros((0, net.cfg.embedding_dim)), np.zeros((0, net.n_ids)), np.zeros(0)
        return tuple(np.concatenate(o) for o in outs)

    def transform(self, segments) -> np.ndarray:
        return self._run(segments)[0]

    def predict_id_proba(self, segments) -> np.ndarray:
        return self._run(segments)[1]

    def predict_machine_proba(self, segments) -> np.ndarray:
        return self._run(segments)[2]

    def forward_all(self, segments):
        return self._run(segments)
