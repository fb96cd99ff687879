"""Training procedures for the compared settings: source-only, target-only,
naive and finetuned adaptation, Sourcerer, DANN and MME.

All procedures expect normalized datasets and are deterministic given
(datasets, config).  Random draws come from named sub-streams of the config
seed so that, e.g., naive and Sourcerer adaptation see identical batches and
dropout masks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .nn import (AdamState, RngStream, adam_step, entropy, softmax, softmax_cross_entropy,
                 softmax_cross_entropy_backward)
from .regularize import (LambdaSchedule, TrainBudget, add_penalty_grads, epochs_for,
                         freeze_bn, lambda_for, penalty, regularized_names)
from .tempcnn import (TempCNNConfig, TempCNNModel, backprop, build_tempcnn, forward_tape,
                      run_layers)

METHODS = ("source-only", "target-only", "naive", "finetune", "sourcerer", "dann", "mme")
ADAPT_MODES = ("naive", "finetune", "sourcerer")


@dataclass
class MethodConfig:
    method: str
    budget: TrainBudget = field(default_factory=TrainBudget)
    seed: int = 0
    lr: float = 1e-3
    model: dict = field(default_factory=dict)   # TempCNNConfig overrides for fresh models
    schedule: LambdaSchedule | None = None      # sourcerer
    fixed_lambda: float | None = None           # sourcerer: bypass the schedule
    dann_alpha: float | None = None             # dann
    mme_lambda: float | None = None             # mme
    mme_temperature: float | None = None        # mme
    pooled_epochs: int = 1                      # dann / mme

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        m = self.method
        if m == "sourcerer":
            if self.schedule is None:
                self.schedule = LambdaSchedule()
        elif self.schedule is not None or self.fixed_lambda is not None:
            raise ValueError(f"lambda schedule given for method {m!r}")
        if m == "dann":
            self.dann_alpha = 1.0 if self.dann_alpha is None else self.dann_alpha
        elif self.dann_alpha is not None:
            raise ValueError(f"dann_alpha given for method {m!r}")
        if m == "mme":
            self.mme_lambda = 0.1 if self.mme_lambda is None else self.mme_lambda
            self.mme_temperature = 0.05 if self.mme_temperature is None else self.mme_temperature
        elif self.mme_lambda is not None or self.mme_temperature is not None:
            raise ValueError(f"MME coefficients given for method {m!r}")
        if self.fixed_lambda is not None and self.fixed_lambda < 0:
            raise ValueError("fixed_lambda must be non-negative")


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    updates: int = 0
    seconds: float = 0.0
    info: dict = field(default_factory=dict)


def model_config_for(ds: Dataset, overrides: dict) -> TempCNNConfig:
    return TempCNNConfig(n_bands=ds.n_bands, n_timesteps=ds.n_timesteps, n_classes=ds.n_classes, **overrides)


def _step(model: TempCNNModel, x, y, state: AdamState, drop_rng: RngStream,
          reference=None, names=None, lam: float = 0.0) -> float:
    tape: list = []
    logits = forward_tape(model, x, "train", drop_rng, tape)
    loss, probs = softmax_cross_entropy(logits, y)
    grads: dict = {}
    backprop(model, tape, softmax_cross_entropy_backward(probs, y), grads)
    if lam:
        loss += lam * penalty(model.params, reference, names)
        add_penalty_grads(grads, model.params, reference, names, lam)
    adam_step(model.params, grads, state)
    return loss


def _fit(model: TempCNNModel, ds: Dataset, epochs: int, batch_size: int, lr: float, rng: RngStream,
         reference=None, names=None, lam: float = 0.0) -> TrainHistory:
    hist = TrainHistory()
    t0 = time.perf_counter()
    state = AdamState.for_params(model.params, lr=lr)
    batch_rng, drop_rng = rng.child("batches"), rng.child("dropout")
    x, y = ds.values, ds.class_ids
    n = len(ds)
    for _ in range(epochs):
        perm = batch_rng.gen.permutation(n)
        for i in range(0, n, batch_size):
            idx = perm[i:i + batch_size]
            if len(idx) < 2 and not model.bn_frozen:
                continue  # batch statistics undefined for a single sample
            hist.losses.append(_step(model, x[idx], y[idx], state, drop_rng, reference, names, lam))
            hist.updates += 1
    hist.seconds = time.perf_counter() - t0
    return hist


def _check_compatible(model: TempCNNModel, ds: Dataset) -> None:
    cfg = model.config
    if (ds.n_bands, ds.n_timesteps) != (cfg.n_bands, cfg.n_timesteps) or ds.n_classes > cfg.n_classes:
        raise ValueError(f"dataset ({ds.n_bands} bands, {ds.n_timesteps} steps, {ds.n_classes} classes) does not "
                         f"fit model ({cfg.n_bands}, {cfg.n_timesteps}, {cfg.n_classes})")


def train_supervised(ds: Dataset, config: MethodConfig, freeze_after: bool = True):
    """Fresh TempCNN trained with plain cross-entropy.

    Used for source-only and target-only.  With ``freeze_after`` the returned
    model normalises with its running statistics in later training, ready for
    adaptation.
    """
    if len(ds) == 0:
        raise ValueError("train_supervised: empty dataset")
    rng = RngStream(config.seed, "supervised")
    model = build_tempcnn(model_config_for(ds, config.model), rng.child("init"))
    hist = _fit(model, ds, epochs_for(len(ds), config.budget), config.budget.batch_size, config.lr, rng)
    if freeze_after:
        freeze_bn(model)
    return model, hist


def adapt(source_model: TempCNNModel, target_train: Dataset, mode: str, config: MethodConfig):
    """Continue training a source model on labelled target data.

    naive: plain cross-entropy.  finetune: convolutional blocks fixed.
    sourcerer: cross-entropy + lambda * ||theta - theta_source||^2 with lambda
    from the instance count.  Without target data the source model is
    returned unchanged.
    """
    if mode not in ADAPT_MODES:
        raise ValueError(f"unknown adaptation mode {mode!r}")
    model = source_model.copy()
    if len(target_train) == 0:
        return model, TrainHistory(info={"lambda": None})
    _check_compatible(model, target_train)
    freeze_bn(model)
    n_t = len(target_train)
    epochs = epochs_for(n_t, config.budget)
    rng = RngStream(config.seed, "adapt")
    if mode == "naive":
        hist = _fit(model, target_train, epochs, config.budget.batch_size, config.lr, rng)
    elif mode == "finetune":
        frozen = model.conv_names
        for n in frozen:
            model.params.set_trainable(n, False)
        hist = _fit(model, target_train, epochs, config.budget.batch_size, config.lr, rng)
        for n in frozen:
            model.params.set_trainable(n, True)
    else:
        if config.fixed_lambda is not None:
            lam = config.fixed_lambda
        else:
            lam = lambda_for(n_t, config.schedule or LambdaSchedule())
        reference = source_model.params.copy()
        names = regularized_names(model.params)
        hist = _fit(model, target_train, epochs, config.budget.batch_size, config.lr, rng,
                    reference=reference, names=names, lam=lam)
        hist.info["lambda"] = lam
    return model, hist


# ---------------------------------------------------------------------------
# pooled comparison methods


def _concat(*parts: Dataset) -> Dataset:
    parts = [p for p in parts if len(p)]
    ref = parts[0]
    return Dataset(np.concatenate([p.values for p in parts]), np.concatenate([p.polygon_ids for p in parts]),
                   np.concatenate([p.class_ids for p in parts]), list(ref.class_names), "pooled")


class _CyclicStream:
    """Endless stream of indices that reshuffles on every pass.

    ``first`` items are always served before ``rest`` within a pass, which is
    how labelled target instances get priority over unlabelled ones.
    """

    def __init__(self, first: int, rest: int, rng: RngStream):
        self.first, self.rest, self.rng = first, rest, rng
        self.buf = np.zeros(0, np.int64)

    def take(self, k: int) -> np.ndarray:
        if self.first + self.rest == 0:
            return np.zeros(0, np.int64)
        while len(self.buf) < k:
            g = self.rng.gen
            order = np.concatenate([g.permutation(self.first), self.first + g.permutation(self.rest)])
            self.buf = np.concatenate([self.buf, order])
        out, self.buf = self.buf[:k], self.buf[k:]
        return out


def reverse_gradient(g: np.ndarray, alpha: float) -> np.ndarray:
    """Backward pass of a gradient-reversal connection (identity forward)."""
    return -alpha * g


def dann_losses_and_grads(model: TempCNNModel, x, class_labels, labelled_mask, domain_labels,
                          alpha: float, rngs: tuple, use_domain: bool = True):
    """One DANN forward/backward.  Returns (class_loss, domain_loss, grads).

    The class head sees only labelled rows; the domain head sees every row
    through a gradient-reversal connection of strength ``alpha``.
    """
    drop_trunk, drop_cls, drop_dom = rngs
    tape_t, tape_c, tape_d = [], [], []
    feats = run_layers(model, model.layers("trunk"), x, "train", drop_trunk, tape_t)
    lab = np.flatnonzero(labelled_mask)
    grads: dict = {}
    g_feats = np.zeros(feats.shape, np.float64)
    logits = run_layers(model, model.layers("class"), feats[lab], "train", drop_cls, tape_c)
    cls_loss, probs = softmax_cross_entropy(logits, class_labels[lab])
    g_feats[lab] = backprop(model, tape_c, softmax_cross_entropy_backward(probs, class_labels[lab]), grads)
    dom_loss = 0.0
    if use_domain:
        dlogits = run_layers(model, model.layers("domain"), feats, "train", drop_dom, tape_d)
        dom_loss, dprobs = softmax_cross_entropy(dlogits, domain_labels)
        g_dom = backprop(model, tape_d, softmax_cross_entropy_backward(dprobs, domain_labels), grads)
        g_feats = g_feats + reverse_gradient(g_dom, alpha)
    backprop(model, tape_t, g_feats, grads)
    return cls_loss, dom_loss, grads


def train_dann(source: Dataset, target_labelled: Dataset, target_unlabelled: Dataset,
               config: MethodConfig, use_domain: bool = True):
    """Domain-adversarial training on pooled data.

    Every batch holds ``batch_size // 2`` source instances and as many target
    instances (labelled first, then unlabelled).  An epoch is one pass over
    the source data.  ``use_domain=False`` drops the domain head (class-only
    training on the same batches).
    """
    if len(source) == 0 or len(target_labelled) + len(target_unlabelled) == 0:
        raise ValueError("train_dann: both domains need data")
    rng = RngStream(config.seed, "dann")
    model = build_tempcnn(model_config_for(source, config.model), rng.child("init"), arch="dann")
    tgt = _concat(target_labelled, target_unlabelled)
    n_lab = len(target_labelled)
    half = config.budget.batch_size // 2
    state = AdamState.for_params(model.params, lr=config.lr)
    src_rng = rng.child("source_batches")
    tstream = _CyclicStream(n_lab, len(target_unlabelled), rng.child("target_batches"))
    rngs = (rng.child("dropout"), rng.child("dropout_class"), rng.child("dropout_domain"))
    hist = TrainHistory(info={"alpha": config.dann_alpha})
    t0 = time.perf_counter()
    for _ in range(config.pooled_epochs):
        perm = src_rng.gen.permutation(len(source))
        for i in range(0, len(source), half):
            s_idx = perm[i:i + half]
            t_idx = tstream.take(half)
            x = np.concatenate([source.values[s_idx], tgt.values[t_idx]])
            y = np.concatenate([source.class_ids[s_idx], tgt.class_ids[t_idx]])
            labelled = np.concatenate([np.ones(len(s_idx), bool), t_idx < n_lab])
            dom = np.concatenate([np.zeros(len(s_idx), np.int64), np.ones(len(t_idx), np.int64)])
            if labelled.sum() < 2 or len(x) < 2:
                continue
            cl, dl, grads = dann_losses_and_grads(model, x, y, labelled, dom, config.dann_alpha, rngs, use_domain)
            adam_step(model.params, grads, state)
            hist.losses.append(cl + dl)
            hist.updates += 1
    hist.seconds = time.perf_counter() - t0
    return model, hist


def entropy_logit_grad(probs: np.ndarray) -> np.ndarray:
    """d(mean row entropy)/d(logits)."""
    p = np.asarray(probs, np.float64)
    logp = np.log(np.clip(p, 1e-300, None))
    h = -(p * logp).sum(axis=1, keepdims=True)
    return -p * (logp + h) / len(p)


def mme_entropy_step(model: TempCNNModel, x, lam: float, rngs: tuple) -> tuple[float, dict]:
    """Adversarial entropy gradients on an unlabelled batch.

    The classifier (fully-connected block and prototypes) ascends the entropy,
    the convolutional feature extractor descends it.  Returns (entropy, grads).
    """
    drop_trunk, drop_cls = rngs
    tape_t, tape_c = [], []
    feats = run_layers(model, model.layers("trunk"), x, "train", drop_trunk, tape_t)
    logits = run_layers(model, model.layers("class"), feats, "train", drop_cls, tape_c)
    probs = softmax(logits)
    grads: dict = {}
    # classifier loss is -lam * H
    g_feats = backprop(model, tape_c, -lam * entropy_logit_grad(probs), grads)
    backprop(model, tape_t, reverse_gradient(g_feats, 1.0), grads)
    return entropy(probs), grads


def _pooled_setup(source, target_labelled, config, name):
    rng = RngStream(config.seed, name)
    model = build_tempcnn(model_config_for(source, config.model), rng.child("init"), arch="mme",
                          temperature=config.mme_temperature if config.mme_temperature is not None else 0.05)
    return rng, model, _concat(source, target_labelled)


def train_pooled(source: Dataset, target_labelled: Dataset, config: MethodConfig):
    """Plain supervised training of the prototype-head model on the pooled
    labelled data (the MME trajectory without its entropy steps)."""
    if len(source) == 0:
        raise ValueError("train_pooled: empty source")
    rng, model, pool = _pooled_setup(source, target_labelled, config, "mme")
    hist = TrainHistory()
    t0 = time.perf_counter()
    state = AdamState.for_params(model.params, lr=config.lr)
    batch_rng, drop_rng = rng.child("batches"), rng.child("dropout")
    bs = config.budget.batch_size
    for _ in range(config.pooled_epochs):
        perm = batch_rng.gen.permutation(len(pool))
        for i in range(0, len(pool), bs):
            idx = perm[i:i + bs]
            if len(idx) < 2:
                continue
            hist.losses.append(_step(model, pool.values[idx], pool.class_ids[idx], state, drop_rng))
            hist.updates += 1
    hist.seconds = time.perf_counter() - t0
    return model, hist


def train_mme(source: Dataset, target_labelled: Dataset, target_unlabelled: Dataset, config: MethodConfig):
    """Minimax-entropy training.

    For each labelled batch (pooled source + labelled target, cross-entropy)
    one adversarial entropy update follows on an unlabelled target batch.
    With ``mme_lambda == 0`` the entropy updates are skipped altogether.
    """
    if len(source) == 0:
        raise ValueError("train_mme: empty source")
    rng, model, pool = _pooled_setup(source, target_labelled, config, "mme")
    lam = config.mme_lambda if config.mme_lambda is not None else 0.1
    hist = TrainHistory(info={"mme_lambda": lam, "temperature": model.temperature, "entropy": []})
    t0 = time.perf_counter()
    state = AdamState.for_params(model.params, lr=config.lr)
    batch_rng, drop_rng = rng.child("batches"), rng.child("dropout")
    ustream = _CyclicStream(0, len(target_unlabelled), rng.child("unlabelled_batches"))
    urngs = (rng.child("dropout_unlabelled"), rng.child("dropout_unlabelled_class"))
    bs = config.budget.batch_size
    for _ in range(config.pooled_epochs):
        perm = batch_rng.gen.permutation(len(pool))
        for i in range(0, len(pool), bs):
            idx = perm[i:i + bs]
            if len(idx) < 2:
                continue
            hist.losses.append(_step(model, pool.values[idx], pool.class_ids[idx], state, drop_rng))
            hist.updates += 1
            if lam == 0.0 or len(target_unlabelled) < 2:
                continue
            u_idx = ustream.take(bs)
            h, grads = mme_entropy_step(model, target_unlabelled.values[u_idx], lam, urngs)
            adam_step(model.params, grads, state)
            hist.info["entropy"].append(h)
            hist.updates += 1
    hist.seconds = time.perf_counter() - t0
    return model, hist


def run_method(method: str, source_model: TempCNNModel | None, source: Dataset | None,
               target_labelled: Dataset, target_unlabelled: Dataset | None, config: MethodConfig):
    """Dispatch helper used by the harness.  Returns (model, history)."""
    if method in ADAPT_MODES:
        return adapt(source_model, target_labelled, method, config)
    if method == "source-only":
        return source_model.copy(), TrainHistory()
    if method == "target-only":
        if len(target_labelled) == 0:
            # nothing to learn from: an untrained network
            rng = RngStream(config.seed, "supervised")
            return build_tempcnn(model_config_for(target_labelled, config.model), rng.child("init")), TrainHistory()
        return train_supervised(target_labelled, config, freeze_after=False)
    empty = target_labelled.subset(np.zeros(0, np.int64))
    unl = target_unlabelled if target_unlabelled is not None else empty
    if method == "dann":
        return train_dann(source, target_labelled, unl, config)
    if method == "mme":
        return train_mme(source, target_labelled, unl, config)
    raise ValueError(f"unknown method {method!r}")


def with_method(config: MethodConfig, method: str) -> MethodConfig:
    """Copy of ``config`` retargeted to another method (method-specific fields reset)."""
    return replace(config, method=method, schedule=None, fixed_lambda=None, dann_alpha=None,
                   mme_lambda=None, mme_temperature=None)
