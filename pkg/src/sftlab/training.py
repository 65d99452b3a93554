"""Toy-scale supervised trainer for transform-aware embedding learning.

The pipeline mirrors the usual deep metric-learning recipe at desk scale:
a small affine embedding model with l2-normalized output, an
additive-margin softmax classifier over scaled cosines, PK batch
composition (p identities, k samples each) and SGD with momentum under a
linear-warmup step schedule.  The spectral transform sits between the
embedding and the classifier; deep supervision optionally applies the
same (or an independent) classifier to the untransformed features.

All gradients are closed-form and verified against central finite
differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import DatasetManifest, FeatureMatrix, Partition, SyntheticSpec, check_paired, generate_synthetic
from .graphcut import affinity_class_means, ncut_loss
from .rng import Xoshiro256StarStar
from .transform import affinity, row_norms, sft_backward, sft_transform_array

DEEP_SUPERVISION_MODES = ("off", "shared", "unshared")
OBJECTIVES = ("sft", "ncut")


@dataclass(frozen=True)
class TrainConfig:
    p: int = 16                      # identities per batch
    k: int = 8                       # samples per identity
    sigma: float = 0.1
    epochs: int = 140
    warmup_epochs: int = 20
    base_lr: float = 0.1
    warmup_start_lr: float = 0.001
    decay_epochs: tuple[int, ...] = (80, 100)
    decay_factor: float = 0.1
    momentum: float = 0.9
    deep_supervision: str = "shared"
    grad_through_transition: bool = True
    use_sft: bool = True             # identity transform when False (baseline runs)
    deep_supervision_weight: float = 1.0
    objective: str = "sft"
    ncut_ce_weight: float = 1.0
    margin: float = 0.3
    scale: float = 15.0
    hidden_dim: int = 64
    embed_dim: int = 32
    batches_per_epoch: int = 0       # 0: floor(train size / (p*k)), at least 1
    diagnostics: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.p < 2 or self.k < 2:
            raise ValueError("batches need p >= 2 identities and k >= 2 samples each")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.batches_per_epoch < 0:
            raise ValueError("counts must be non-negative")
        if self.base_lr <= 0 or self.warmup_start_lr <= 0 or self.decay_factor <= 0:
            raise ValueError("learning rates and decay factor must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.deep_supervision not in DEEP_SUPERVISION_MODES:
            raise ValueError(f"unknown deep_supervision mode {self.deep_supervision!r}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.margin < 0 or self.scale <= 0:
            raise ValueError("margin must be >= 0 and scale > 0")
        if self.hidden_dim < 0 or self.embed_dim < 1:
            raise ValueError("bad model dimensions")
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))


def load_train_config(path, base: TrainConfig | None = None) -> TrainConfig:
    """Parse `key = value` lines (# comments) into a TrainConfig."""
    base = base or TrainConfig()
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    updates = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in kinds:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        kind = kinds[key]
        if kind == "int":
            updates[key] = int(value)
        elif kind == "float":
            updates[key] = float(value)
        elif kind == "bool":
            if value.lower() not in ("true", "false"):
                raise ValueError(f"config line {lineno}: bad bool {value!r}")
            updates[key] = value.lower() == "true"
        elif kind.startswith("tuple"):
            updates[key] = tuple(int(v) for v in value.split(",") if v.strip())
        else:
            updates[key] = value
    return replace(base, **updates)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate at an epoch: linear warmup then stepwise decay."""
    if epoch < 0 or epoch >= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        frac = epoch / cfg.warmup_epochs
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * frac
    lr = cfg.base_lr
    for boundary in cfg.decay_epochs:
        if epoch >= boundary:
            lr *= cfg.decay_factor
    return lr


@dataclass
class EmbedModel:
    """One or two affine maps with a rectifier between, l2-normalized output."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    normalize_output: bool = True

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, embed_dim: int, rng: Xoshiro256StarStar) -> "EmbedModel":
        """Random init scaled by 1/sqrt(fan_in); hidden_dim 0 drops the hidden layer."""
        dims = [input_dim, embed_dim] if hidden_dim == 0 else [input_dim, hidden_dim, embed_dim]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            scale = 1.0 / np.sqrt(fan_in)
            w = np.array(rng.normals(fan_in * fan_out)).reshape(fan_in, fan_out) * scale
            weights.append(w)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        pre = x @ self.weights[0] + self.biases[0]
        if len(self.weights) == 2:
            act = np.maximum(pre, 0.0)
            raw = act @ self.weights[1] + self.biases[1]
        else:
            act = None
            raw = pre
        if self.normalize_output:
            norms = row_norms(raw)
            out = raw / norms[:, None]
        else:
            norms = None
            out = raw
        return out, (x, pre, act, norms, out)

    def embed(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: tuple, grad_out: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Parameter gradients [(dW, db), ...] matching the layer order."""
        x, pre, act, norms, out = cache
        if self.normalize_output:
            radial = np.einsum("ij,ij->i", grad_out, out)
            grad_raw = (grad_out - radial[:, None] * out) / norms[:, None]
        else:
            grad_raw = grad_out
        if len(self.weights) == 2:
            grad_w1 = act.T @ grad_raw
            grad_b1 = grad_raw.sum(axis=0)
            grad_pre = (grad_raw @ self.weights[1].T) * (pre > 0)
            grad_w0 = x.T @ grad_pre
            grad_b0 = grad_pre.sum(axis=0)
            return [(grad_w0, grad_b0), (grad_w1, grad_b1)]
        grad_w0 = x.T @ grad_raw
        grad_b0 = grad_raw.sum(axis=0)
        return [(grad_w0, grad_b0)]


@dataclass
class AmSoftmaxClassifier:
    """Cosine classifier with additive margin and logit scaling."""

    weight: np.ndarray  # (num_classes, embed_dim)
    margin: float = 0.3
    scale: float = 15.0

    def __post_init__(self):
        if self.margin < 0 or self.scale <= 0:
            raise ValueError("margin must be >= 0 and scale > 0")

    @classmethod
    def init(cls, num_classes: int, embed_dim: int, rng: Xoshiro256StarStar,
             margin: float = 0.3, scale: float = 15.0) -> "AmSoftmaxClassifier":
        w = np.array(rng.normals(num_classes * embed_dim)).reshape(num_classes, embed_dim)
        return cls(w / np.sqrt(embed_dim), margin, scale)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)


def _as_labels(labels) -> np.ndarray:
    return labels.labels if isinstance(labels, Partition) else np.asarray(labels, dtype=np.int64)


def _am_softmax_parts(x: np.ndarray, y: np.ndarray, clf: AmSoftmaxClassifier):
    if y.shape != (x.shape[0],):
        raise ValueError(f"labels shape {y.shape} does not match {x.shape[0]} samples")
    if y.min() < 0 or y.max() >= clf.num_classes:
        raise ValueError(
            f"label {int(y.max() if y.max() >= clf.num_classes else y.min())} "
            f"out of range for {clf.num_classes} classes"
        )
    feat_norms = row_norms(x)
    feat = x / feat_norms[:, None]
    w_norms = row_norms(clf.weight)
    w_unit = clf.weight / w_norms[:, None]
    cos = feat @ w_unit.T
    logits = clf.scale * cos
    rows = np.arange(x.shape[0])
    logits[rows, y] = clf.scale * (cos[rows, y] - clf.margin)
    zmax = logits.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
    losses = lse - logits[rows, y]
    return feat, feat_norms, w_unit, w_norms, cos, logits, lse, float(losses.mean())


def am_softmax_value(features, labels, clf: AmSoftmaxClassifier) -> float:
    """Forward-only loss value (used for logging and finite differences)."""
    x, y = _as_array(features), _as_labels(labels)
    return _am_softmax_parts(x, y, clf)[-1]


def am_softmax_loss(features, labels, clf: AmSoftmaxClassifier):
    """Mean margin-softmax loss plus gradients w.r.t. features and weights.

    Feature rows and classifier rows are both normalized inside, so the
    loss depends only on directions; the returned gradients are taken
    w.r.t. the raw (unnormalized) inputs.
    """
    wrapped = isinstance(features, FeatureMatrix)
    x, y = _as_array(features), _as_labels(labels)
    feat, feat_norms, w_unit, w_norms, cos, logits, lse, loss = _am_softmax_parts(x, y, clf)
    n = x.shape[0]
    rows = np.arange(n)
    probs = np.exp(logits - lse[:, None])
    grad_logits = probs
    grad_logits[rows, y] -= 1.0
    grad_cos = clf.scale * grad_logits / n
    grad_feat = grad_cos @ w_unit
    grad_wunit = grad_cos.T @ feat
    radial_f = np.einsum("ij,ij->i", grad_feat, feat)
    grad_x = (grad_feat - radial_f[:, None] * feat) / feat_norms[:, None]
    radial_w = np.einsum("ij,ij->i", grad_wunit, w_unit)
    grad_w = (grad_wunit - radial_w[:, None] * w_unit) / w_norms[:, None]
    if wrapped:
        return loss, FeatureMatrix(grad_x), grad_w
    return loss, grad_x, grad_w


@dataclass(frozen=True)
class PKBatch:
    """Row indices of p identities x k samples and their identity labels."""

    indices: np.ndarray
    identities: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        ids = np.asarray(self.identities, dtype=np.int64)
        if idx.shape != ids.shape or idx.ndim != 1:
            raise ValueError("indices and identities must be matching 1-d vectors")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "identities", ids)


def sample_pk(manifest: DatasetManifest, p: int, k: int, rng: Xoshiro256StarStar) -> PKBatch:
    """Sample p distinct train identities, k rows each.

    Identities are drawn uniformly without replacement; within an
    identity, rows are drawn without replacement when it has at least k
    samples and with replacement otherwise.
    """
    by_identity: dict[int, list[int]] = {}
    for i, rec in enumerate(manifest.records):
        if rec.split == "train":
            by_identity.setdefault(rec.identity, []).append(i)
    identities = sorted(by_identity)
    if len(identities) < p:
        raise ValueError(f"need {p} train identities, manifest has {len(identities)}")
    chosen = [identities[pos] for pos in rng.sample(len(identities), p)]
    indices, labels = [], []
    for ident in chosen:
        rows = by_identity[ident]
        if len(rows) >= k:
            picks = rng.sample(len(rows), k)
        else:
            picks = [rng.randrange(len(rows)) for _ in range(k)]
        indices.extend(rows[j] for j in picks)
        labels.extend([ident] * k)
    return PKBatch(np.array(indices), np.array(labels))


@dataclass
class Grads:
    model: list[tuple[np.ndarray, np.ndarray]]
    clf: np.ndarray
    clf_orig: np.ndarray | None = None


def training_loss(x: np.ndarray, labels: np.ndarray, model: EmbedModel,
                  clf: AmSoftmaxClassifier, cfg: TrainConfig,
                  clf_orig: AmSoftmaxClassifier | None = None) -> float:
    """Scalar objective that forward_backward differentiates."""
    emb = model.embed(x)
    if cfg.objective == "ncut":
        graph_loss, _ = ncut_loss(FeatureMatrix(emb), Partition(labels), cfg.sigma)
        return graph_loss + cfg.ncut_ce_weight * am_softmax_value(emb, labels, clf)
    z = sft_transform_array(emb, cfg.sigma) if cfg.use_sft else emb
    total = am_softmax_value(z, labels, clf)
    if cfg.deep_supervision == "shared":
        total += cfg.deep_supervision_weight * am_softmax_value(emb, labels, clf)
    elif cfg.deep_supervision == "unshared":
        total += cfg.deep_supervision_weight * am_softmax_value(emb, labels, clf_orig)
    return total


def forward_backward(x: np.ndarray, labels: np.ndarray, model: EmbedModel,
                     clf: AmSoftmaxClassifier, cfg: TrainConfig,
                     clf_orig: AmSoftmaxClassifier | None = None):
    """One training step's losses and parameter gradients.

    Returns (loss_orig, loss_sft, Grads).  loss_sft is the classifier
    loss on transformed features (or the graph-cut loss under the ncut
    objective); loss_orig is the classifier loss on the untransformed
    embedding, which contributes gradient only when deep supervision is
    on (it is still reported otherwise, for the log).
    """
    labels = _as_labels(labels)
    emb, cache = model.forward(np.asarray(x, dtype=np.float64))

    if cfg.objective == "ncut":
        graph_loss, grad_emb_graph = ncut_loss(FeatureMatrix(emb), Partition(labels), cfg.sigma)
        ce_loss, grad_emb_ce, grad_clf = am_softmax_loss(emb, labels, clf)
        grad_emb = grad_emb_graph.data + cfg.ncut_ce_weight * grad_emb_ce
        grads = Grads(model.backward(cache, grad_emb), cfg.ncut_ce_weight * grad_clf)
        return ce_loss, graph_loss, grads

    z = sft_transform_array(emb, cfg.sigma) if cfg.use_sft else emb
    loss_sft, grad_z, grad_clf_sft = am_softmax_loss(z, labels, clf)
    if cfg.use_sft:
        grad_emb = sft_backward(emb, cfg.sigma, grad_z, cfg.grad_through_transition)
    else:
        grad_emb = grad_z

    mode = cfg.deep_supervision
    weight = cfg.deep_supervision_weight
    clf_grad_orig = None
    if mode == "off":
        loss_orig = am_softmax_value(emb, labels, clf)
        grad_clf = grad_clf_sft
    elif mode == "shared":
        loss_orig, grad_emb_orig, grad_clf_orig_path = am_softmax_loss(emb, labels, clf)
        grad_emb = grad_emb + weight * grad_emb_orig
        grad_clf = grad_clf_sft + weight * grad_clf_orig_path
    else:
        if clf_orig is None:
            raise ValueError("unshared deep supervision needs the second classifier")
        loss_orig, grad_emb_orig, grad_unshared = am_softmax_loss(emb, labels, clf_orig)
        grad_emb = grad_emb + weight * grad_emb_orig
        grad_clf = grad_clf_sft
        clf_grad_orig = weight * grad_unshared
    return loss_orig, loss_sft, Grads(model.backward(cache, grad_emb), grad_clf, clf_grad_orig)


@dataclass
class TrainResult:
    model: EmbedModel
    classifier: AmSoftmaxClassifier
    classifier_orig: AmSoftmaxClassifier | None
    log: list[str]


def train(features, manifest: DatasetManifest | None, cfg: TrainConfig) -> TrainResult:
    """Full training loop, deterministic given the config seed.

    `features` may be a FeatureMatrix paired with `manifest`, or a
    SyntheticSpec (manifest None) that is generated on the spot.  Log
    lines are `epoch<TAB>lr<TAB>loss_orig<TAB>loss_sft`, with mean
    intra/inter affinity and the graph-cut loss of the train embeddings
    appended when cfg.diagnostics is set.
    """
    if isinstance(features, SyntheticSpec):
        if manifest is not None:
            raise ValueError("manifest must be None when generating from a spec")
        features, manifest = generate_synthetic(features)
    check_paired(features, manifest)

    train_idx = manifest.indices("train")
    if not train_idx:
        raise ValueError("manifest has no train rows")
    identities = sorted({manifest.records[i].identity for i in train_idx})
    if len(identities) < 2:
        raise ValueError("training needs at least 2 identities")
    class_of = {ident: c for c, ident in enumerate(identities)}

    rng = Xoshiro256StarStar(cfg.seed)
    model = EmbedModel.init(features.d, cfg.hidden_dim, cfg.embed_dim, rng)
    clf = AmSoftmaxClassifier.init(len(identities), cfg.embed_dim, rng, cfg.margin, cfg.scale)
    clf_orig = None
    if cfg.objective == "sft" and cfg.deep_supervision == "unshared":
        clf_orig = AmSoftmaxClassifier.init(len(identities), cfg.embed_dim, rng, cfg.margin, cfg.scale)

    params = [w for w in model.weights] + [b for b in model.biases] + [clf.weight]
    if clf_orig is not None:
        params.append(clf_orig.weight)
    velocity = [np.zeros_like(p) for p in params]

    batches = cfg.batches_per_epoch or max(1, len(train_idx) // (cfg.p * cfg.k))
    log: list[str] = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        sum_orig = 0.0
        sum_sft = 0.0
        for _ in range(batches):
            batch = sample_pk(manifest, cfg.p, cfg.k, rng)
            x = features.data[batch.indices]
            y = np.array([class_of[i] for i in batch.identities])
            loss_orig, loss_sft, grads = forward_backward(x, y, model, clf, cfg, clf_orig)
            sum_orig += loss_orig
            sum_sft += loss_sft
            flat = (
                [gw for gw, _ in grads.model]
                + [gb for _, gb in grads.model]
                + [grads.clf]
                + ([grads.clf_orig] if clf_orig is not None else [])
            )
            for param, vel, grad in zip(params, velocity, flat):
                vel *= cfg.momentum
                vel -= lr * grad
                param += vel
        line = f"{epoch}\t{lr:.12g}\t{sum_orig / batches:.12g}\t{sum_sft / batches:.12g}"
        if cfg.diagnostics:
            emb = model.embed(features.data[train_idx])
            labels = Partition(np.array([class_of[manifest.records[i].identity] for i in train_idx]))
            intra, inter = affinity_class_means(affinity(FeatureMatrix(emb), cfg.sigma), labels)
            graph_val, _ = ncut_loss(FeatureMatrix(emb), labels, cfg.sigma)
            line += f"\t{intra:.12g}\t{inter:.12g}\t{graph_val:.12g}"
        log.append(line)
    return TrainResult(model, clf, clf_orig, log)
