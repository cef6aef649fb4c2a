"""Training loops: base pretraining and per-domain finetuning."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import Dataset, batches
from .errors import DataError, NumericalError
from .layers import Linear, SoftmaxXent
from .model import DomainSpec, SepResNet
from .optim import MomentumState, OptimConfig, lr_at, sgd_step
from .tensor import make_rng

log = logging.getLogger(__name__)

HEAD = ("head.w", "head.b")


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    accuracy: float

    def row(self) -> list:
        return [self.epoch, self.split, f"{self.loss:.6f}", f"{self.accuracy:.6f}"]


def predict(model: SepResNet, d, images: np.ndarray, gates=None, batch_size: int = 250) -> np.ndarray:
    """Eval-mode logits for ``images``, computed in fixed-size chunks."""
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model.forward(images[i:i + batch_size], d, "eval", gates=gates))
    model.clear_caches()
    return np.concatenate(out)


def evaluate(model: SepResNet, d, dataset: Dataset, gates=None) -> EpochMetrics:
    logits = predict(model, d, dataset.images, gates)
    loss, _ = SoftmaxXent().forward(logits.astype(np.float64), dataset.labels)
    acc = float((np.argmax(logits, axis=1) == dataset.labels).mean())
    return EpochMetrics(-1, dataset.split, loss, acc)


def _check_finite(loss: float, epoch: int):
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss at epoch {epoch}")


def fit(model: SepResNet, d, train: Dataset, optim: OptimConfig, params: dict, *, seed: int,
        weight_decay: float | None = None, gates=None, train_bn=None, test: Dataset | None = None,
        on_step=None) -> list[EpochMetrics]:
    """SGD over ``params`` (name -> array updated in place) on domain ``d``.

    Every other tensor stays frozen. BN layers named in ``train_bn`` use batch
    statistics; all others use running estimates.
    """
    if len(train) == 0:
        raise DataError("empty training set")
    d = model.domain_index(d)
    wd = optim.weight_decay if weight_decay is None else weight_decay
    names = sorted(params)
    need = set(names)
    state = MomentumState()
    metrics = []
    if gates is None and need <= set(HEAD):
        metrics = _fit_head(model, d, train, optim, params, seed, wd)
    else:
        for epoch in range(optim.epochs):
            lr = lr_at(optim, epoch)
            tot_loss = tot_correct = 0.0
            for x, y in batches(train, optim.batch_size, seed, epoch):
                logits = model.forward(x, d, "train", train_bn=train_bn, gates=gates)
                xent = SoftmaxXent()
                loss, probs = xent.forward(logits, y)
                _check_finite(loss, epoch)
                grads = model.backward(xent.backward(1.0)[0], need=need)
                sgd_step([params[n] for n in names], [grads[n] for n in names], state,
                         lr, optim.momentum, wd, keys=names)
                tot_loss += loss * len(y)
                tot_correct += float((probs.argmax(axis=1) == y).sum())
                if on_step is not None:
                    on_step(epoch)
            m = EpochMetrics(epoch, "train", tot_loss / len(train), tot_correct / len(train))
            log.info("epoch %d lr %.4g loss %.4f acc %.4f", epoch, lr, m.loss, m.accuracy)
            metrics.append(m)
    if test is not None:
        t = evaluate(model, d, test, gates)
        t.epoch = optim.epochs - 1
        metrics.append(t)
    return metrics


def _fit_head(model, d, train, optim, params, seed, wd):
    """Classifier-only training: the frozen backbone's features are computed once."""
    feats = []
    for i in range(0, len(train), 250):
        feats.append(model.features(train.images[i:i + 250], d, "eval"))
    model.clear_caches()
    feats = np.concatenate(feats)
    names = sorted(params)
    state = MomentumState()
    metrics = []
    head = Linear()
    for epoch in range(optim.epochs):
        lr = lr_at(optim, epoch)
        tot_loss = tot_correct = 0.0
        order = make_rng(seed, 7, epoch).permutation(len(train))
        for start in range(0, len(order), optim.batch_size):
            idx = order[start:start + optim.batch_size]
            y = train.labels[idx]
            logits = head.forward(feats[idx], model.tensor("head.w", d), model.tensor("head.b", d))
            xent = SoftmaxXent()
            loss, probs = xent.forward(logits, y)
            _check_finite(loss, epoch)
            _, pg = head.backward(xent.backward(1.0)[0])
            grads = {"head.w": pg["weights"], "head.b": pg["bias"]}
            sgd_step([params[n] for n in names], [grads[n] for n in names], state,
                     lr, optim.momentum, wd, keys=names)
            tot_loss += loss * len(y)
            tot_correct += float((probs.argmax(axis=1) == y).sum())
        metrics.append(EpochMetrics(epoch, "train", tot_loss / len(train), tot_correct / len(train)))
    return metrics


def _bn_prefixes(names) -> set[str]:
    return {n.rsplit(".", 1)[0] for n in names if n.endswith(".scale")}


def pretrain_base(model: SepResNet, base: DomainSpec, train: Dataset, optim: OptimConfig, *,
                  seed: int = 0, test: Dataset | None = None, on_step=None) -> list[EpochMetrics]:
    """Register ``base`` as domain 0 and train every tensor on it."""
    if len(train) == 0:
        raise DataError("empty base dataset")
    if model.num_domains == 0:
        model.register_domain(base, init="random")
    d = model.domain_index(base.name)
    refs = model.shared_refs() + model.domain_refs(d)
    params = {n: model.ref_tensor((n, o)) for n, o in refs}
    return fit(model, d, train, optim, params, seed=seed, weight_decay=base.weight_decay,
               train_bn=_bn_prefixes(params), test=test, on_step=on_step)


def trainable_params(model: SepResNet, d) -> dict[str, np.ndarray]:
    """Domain ``d``'s own tensors: everything a finetune may touch."""
    return {n: model.ref_tensor((n, o)) for n, o in model.domain_refs(d)}


def finetune_domain(model: SepResNet, d, train: Dataset, optim: OptimConfig, *, seed: int = 0,
                    test: Dataset | None = None, on_step=None) -> list[EpochMetrics]:
    """Train only the tensors owned by domain ``d``; shared tensors stay frozen."""
    d = model.domain_index(d)
    params = trainable_params(model, d)
    return fit(model, d, train, optim, params, seed=seed, weight_decay=model.domains[d].weight_decay,
               train_bn=_bn_prefixes(params), test=test, on_step=on_step)
