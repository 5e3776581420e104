"""The incremental-session state machine.

A run partitions the class universe into disjoint per-session sets, then
trains one model through the sessions: expand the classifier and the token
bank, restore old-class labels with the dynamic pseudo-labeler, fit on the
asymmetric loss (plus the token-retention term from session two onward),
optionally replay buffered exemplars, and evaluate on the union of all
test sets seen so far. Snapshots of the previous session's model drive
both pseudo-labeling and the retention losses and are never mutated.

Method arms differ only in flags: use_dpl, use_ica, use_kd, and the
buffer policy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import ica as ica_mod
from . import tensor as T
from .datagen import Dataset
from .dpl import DplConfig, PseudoLabelReport, dynamic_threshold_search, session_target
from .ica import IcaConfig, IcaState
from .losses import LossConfig, asl_loss, kd_pooled_loss, token_loss, total_loss
from .metrics import EvalBatch, MetricsRecord, evaluate
from .optim import Adam
from .tensor import Tape, Tensor, backward

CHECKPOINT_MAGIC = b"KRT1"


# ---------------------------------------------------------------------------
# session planning


@dataclass
class SessionPlan:
    class_order: list  # all class names, lexicographic
    session_classes: list  # per session, global class indices (order = logit order)
    base_count: int
    inc_count: int
    train_indices: list = field(default_factory=list)  # per session, example indices
    test_indices: list = field(default_factory=list)

    @property
    def n_sessions(self) -> int:
        return len(self.session_classes)

    def classes_through(self, t: int) -> list:
        out = []
        for s in range(t):
            out.extend(self.session_classes[s])
        return out


def build_plan(class_names: list, base: int, inc: int) -> SessionPlan:
    """Partition lexicographically sorted classes into session chunks.

    base=0 means every session (including the first) takes `inc` classes;
    base == len(class_names) is the single-session joint arm.
    """
    names = sorted(class_names)
    total = len(names)
    if base < 0 or base > total:
        raise ValueError(f"base {base} outside 0..{total}")
    rest = total - base
    if base == total:
        chunks = [total]
    else:
        if inc <= 0:
            raise ValueError("inc must be positive")
        if rest % inc != 0:
            raise ValueError(f"{rest} remaining classes not divisible by inc {inc}")
        chunks = ([base] if base > 0 else []) + [inc] * (rest // inc)
    order = {name: i for i, name in enumerate(names)}
    sessions, cursor = [], 0
    for size in chunks:
        sessions.append([order[n] for n in names[cursor : cursor + size]])
        cursor += size
    return SessionPlan(
        class_order=names,
        session_classes=sessions,
        base_count=base,
        inc_count=inc if base != total else 0,
    )


def assign_examples(plan: SessionPlan, train: Dataset, test: Dataset) -> None:
    """Fill per-session example index sets.

    A training image joins every session that owns one of its classes (its
    visible labels are restricted to that session's classes, which is what
    makes old-class labels absent). Test images go to the earliest session
    owning one of their classes, keeping the per-session test sets disjoint.
    """
    session_of = {}
    for s, classes in enumerate(plan.session_classes):
        for c in classes:
            session_of[c] = s
    plan.train_indices = [[] for _ in plan.session_classes]
    plan.test_indices = [[] for _ in plan.session_classes]
    for i, ex in enumerate(train.examples):
        for s in sorted({session_of[c] for c in ex.labels}):
            plan.train_indices[s].append(i)
    for i, ex in enumerate(test.examples):
        plan.test_indices[min(session_of[c] for c in ex.labels)].append(i)


# ---------------------------------------------------------------------------
# model


@dataclass
class ArmFlags:
    use_dpl: bool = True
    use_ica: bool = True
    use_kd: bool = False
    buffer_policy: tuple = ("none",)  # ("none",) | ("per_class", k) | ("total", m)


@dataclass
class ModelState:
    conv_w: Tensor
    conv_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    pos_enc: Tensor  # constant [1, L, d]
    ica: Optional[IcaState]
    heads: list  # per session (w [d, N_t], b [N_t])
    flags: ArmFlags
    grid: tuple  # (h, w, c)
    d: int

    @property
    def session_count(self) -> int:
        return len(self.heads)

    @property
    def n_outputs(self) -> int:
        return sum(h[1].size for h in self.heads)

    def trainable_parameters(self) -> list:
        params = [self.conv_w, self.conv_b, self.proj_w, self.proj_b]
        if self.ica is not None:
            params += self.ica.trainable_parameters()
        for w, b in self.heads:
            params += [w, b]
        return params

    def named_parameters(self) -> list:
        named = [
            ("conv.w", self.conv_w),
            ("conv.b", self.conv_b),
            ("proj.w", self.proj_w),
            ("proj.b", self.proj_b),
        ]
        if self.ica is not None:
            s = self.ica
            named += [
                ("ica.w_q", s.w_q), ("ica.w_k", s.w_k), ("ica.w_v", s.w_v),
                ("ica.w_o", s.w_o), ("ica.b_o", s.b_o),
                ("ica.norm1.gain", s.norm1_gain), ("ica.norm1.bias", s.norm1_bias),
                ("ica.norm2.gain", s.norm2_gain), ("ica.norm2.bias", s.norm2_bias),
                ("ica.mlp.w1", s.mlp_w1), ("ica.mlp.b1", s.mlp_b1),
                ("ica.mlp.w2", s.mlp_w2), ("ica.mlp.b2", s.mlp_b2),
                ("ica.kt", s.kt_token),
            ]
            named += [(f"ica.kr.{i}", kr) for i, kr in enumerate(s.kr_tokens)]
        for i, (w, b) in enumerate(self.heads):
            named += [(f"head.{i}.w", w), (f"head.{i}.b", b)]
        return named


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(d)[None, :].astype(np.float64)
    angles = pos / np.power(10000.0, (2.0 * (i // 2)) / d)
    enc = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return enc


def init_model(
    grid: tuple,
    ica_config: IcaConfig,
    flags: ArmFlags,
    rng: np.random.Generator,
    extractor_width: int = 0,
    pos_enc_scale: float = 0.1,
) -> ModelState:
    """Fresh model with no sessions.

    The patch extractor is one 3x3 local-mixing convolution plus gelu; its
    output width defaults to 8x the input channels, which gives prototypes
    room to decorrelate before token projection. Position encodings are
    fixed sinusoids, scaled down so content dominates the keys at init.
    """
    h, w, c = grid
    d = ica_config.d
    width = extractor_width if extractor_width > 0 else 8 * c
    model = ModelState(
        conv_w=T.uniform_param(rng, (9 * c, width)),
        conv_b=T.uniform_param(rng, (width,), fan_in=9 * c),
        proj_w=T.uniform_param(rng, (width, d)),
        proj_b=T.uniform_param(rng, (d,), fan_in=width),
        pos_enc=Tensor(pos_enc_scale * sinusoidal_positions(h * w, d)[None, :, :]),
        ica=ica_mod.init_ica(ica_config, rng) if flags.use_ica else None,
        heads=[],
        flags=flags,
        grid=grid,
        d=d,
    )
    return model


def expand_for_session(model: ModelState, n_new_classes: int, rng: np.random.Generator) -> None:
    """Session start: new retention token (ICA arms) and a new head chunk."""
    if model.ica is not None:
        ica_mod.add_session(model.ica, rng)
    model.heads.append(
        (
            T.uniform_param(rng, (model.d, n_new_classes)),
            T.uniform_param(rng, (n_new_classes,), fan_in=model.d),
        )
    )


@dataclass
class ForwardOut:
    logits: Tensor  # [B, N]
    embeddings: list  # per session [B, d] (empty for pooled-path arms)
    pooled: Optional[Tensor]  # [B, d] global average over patch tokens


def forward_logits(model: ModelState, images: np.ndarray, attn_out: list = None) -> ForwardOut:
    """Patch extraction, projection, position encoding, then the head stack."""
    if model.session_count == 0:
        raise ValueError("model has no sessions yet")
    x = Tensor(np.asarray(images, dtype=np.float64))
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    bsz, h, w, c = x.shape
    if (h, w, c) != model.grid:
        raise T.TensorError(f"image grid {(h, w, c)} does not match model grid {model.grid}")
    width = model.conv_w.shape[1]
    feats = T.gelu(T.conv3x3_same(x, model.conv_w, model.conv_b))
    patches = T.affine(feats.reshape(bsz * h * w, width), model.proj_w, model.proj_b)
    patches = patches.reshape(bsz, h * w, model.d)
    patches = T.add(patches, T.repeat_rows(model.pos_enc, bsz))

    pooled = None
    if model.flags.use_ica:
        embeddings = ica_mod.forward_all_sessions(model.ica, patches, attn_out=attn_out)
        per_session = embeddings
        if model.flags.use_kd:
            pooled = _global_pool(patches)
    else:
        embeddings = []
        pooled = _global_pool(patches)
        per_session = [pooled] * model.session_count
    logits = T.concat(
        [T.affine(e, w_, b_) for e, (w_, b_) in zip(per_session, model.heads)], axis=1
    )
    return ForwardOut(logits=logits, embeddings=embeddings, pooled=pooled)


def _global_pool(patches: Tensor) -> Tensor:
    bsz, length, _ = patches.shape
    ones = Tensor(np.full((bsz, length), 1.0 / length))
    return T.weighted_rows_sum(ones, patches)


def snapshot_model(model: ModelState) -> ModelState:
    """Deep immutable copy; every parameter is a fresh constant tensor."""
    def const(t: Tensor) -> Tensor:
        return Tensor(t.data.copy())

    snap_ica = None
    if model.ica is not None:
        s = model.ica
        snap_ica = IcaState(
            config=s.config,
            w_q=const(s.w_q), w_k=const(s.w_k), w_v=const(s.w_v),
            w_o=const(s.w_o), b_o=const(s.b_o),
            norm1_gain=const(s.norm1_gain), norm1_bias=const(s.norm1_bias),
            norm2_gain=const(s.norm2_gain), norm2_bias=const(s.norm2_bias),
            mlp_w1=const(s.mlp_w1), mlp_b1=const(s.mlp_b1),
            mlp_w2=const(s.mlp_w2), mlp_b2=const(s.mlp_b2),
            kt_token=const(s.kt_token),
            kr_tokens=[const(kr) for kr in s.kr_tokens],
        )
    return ModelState(
        conv_w=const(model.conv_w),
        conv_b=const(model.conv_b),
        proj_w=const(model.proj_w),
        proj_b=const(model.proj_b),
        pos_enc=const(model.pos_enc),
        ica=snap_ica,
        heads=[(const(w), const(b)) for w, b in model.heads],
        flags=replace(model.flags),
        grid=model.grid,
        d=model.d,
    )


# ---------------------------------------------------------------------------
# rehearsal buffer


@dataclass
class BufferEntry:
    image_id: int
    features: np.ndarray
    labels_known: set  # annotated labels accumulated across storing sessions


class RehearsalBuffer:
    """Per-class exemplar references over a deduplicated image store."""

    def __init__(self, policy: tuple = ("none",)):
        kind = policy[0]
        if kind not in ("none", "per_class", "total"):
            raise ValueError(f"unknown buffer policy {policy!r}")
        self.policy = tuple(policy)
        self.store: dict = {}  # image_id -> BufferEntry
        self.class_refs: dict = {}  # class index -> [image_id]

    def __len__(self):
        return len(self.store)

    def exemplars(self) -> list:
        return [self.store[i] for i in sorted(self.store)]

    def update(self, session_classes, items, rng: np.random.Generator) -> None:
        """Select exemplars of the just-finished session.

        items are (image_id, features, visible_labels) triples; selection is
        uniform per new class among images truly labeled with that class.
        """
        kind = self.policy[0]
        if kind == "none":
            return
        if kind == "per_class":
            quota = self.policy[1]
        else:
            total_classes = len(self.class_refs) + len(session_classes)
            quota = max(1, self.policy[1] // max(1, total_classes))
        for cls in session_classes:
            candidates = [it for it in items if cls in it[2]]
            take = min(quota, len(candidates))
            if take == 0:
                self.class_refs.setdefault(cls, [])
                continue
            picked = rng.choice(len(candidates), size=take, replace=False)
            refs = []
            for idx in sorted(int(i) for i in picked):
                image_id, feats, visible = candidates[idx]
                entry = self.store.get(image_id)
                if entry is None:
                    self.store[image_id] = BufferEntry(image_id, feats, set(visible))
                else:
                    entry.labels_known |= set(visible)
                refs.append(image_id)
            self.class_refs[cls] = refs
        if kind == "total":
            self._evict_to(self.policy[1], rng)

    def _evict_to(self, capacity: int, rng: np.random.Generator) -> None:
        over = len(self.store) - capacity
        if over <= 0:
            return
        ids = sorted(self.store)
        victims = {ids[int(i)] for i in rng.choice(len(ids), size=over, replace=False)}
        for vid in victims:
            del self.store[vid]
        for cls, refs in self.class_refs.items():
            self.class_refs[cls] = [r for r in refs if r not in victims]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    loss: LossConfig = field(default_factory=LossConfig)
    dpl: DplConfig = field(default_factory=DplConfig)
    extractor_width: int = 0  # 0 -> 8x input channels
    pos_enc_scale: float = 0.1


@dataclass
class SessionItem:
    image_id: int
    features: np.ndarray
    visible: set  # annotated labels (session-restricted or buffer-known)
    pseudo: set = field(default_factory=set)
    is_exemplar: bool = False
    dataset_index: int = -1  # index into the train pool, -1 for pure buffer entries


@dataclass
class SessionOutcome:
    metrics: MetricsRecord
    dpl_report: Optional[PseudoLabelReport]
    pseudo_recall: Optional[float]  # vs generator truth, None when DPL off / t == 1
    snapshot: ModelState


def _session_items(plan: SessionPlan, train: Dataset, t: int, buffer: RehearsalBuffer) -> list:
    current_classes = set(plan.session_classes[t - 1])
    items = []
    for idx in plan.train_indices[t - 1]:
        ex = train.examples[idx]
        items.append(
            SessionItem(
                image_id=ex.image_id,
                features=ex.features,
                visible=ex.labels & current_classes,
                dataset_index=idx,
            )
        )
    current_ids = {it.image_id for it in items}
    for entry in buffer.exemplars():
        if entry.image_id in current_ids:
            # the image re-appears with new-session annotations; merge views
            for it in items:
                if it.image_id == entry.image_id:
                    it.visible |= entry.labels_known
                    it.is_exemplar = True
                    break
        else:
            items.append(
                SessionItem(
                    image_id=entry.image_id,
                    features=entry.features,
                    visible=set(entry.labels_known),
                    is_exemplar=True,
                )
            )
    return items


def _score_old_classes(snapshot: ModelState, items, batch_size: int) -> np.ndarray:
    """Old-class probabilities from the frozen previous model (no tape)."""
    chunks = []
    for lo in range(0, len(items), batch_size):
        batch = items[lo : lo + batch_size]
        images = np.stack([it.features for it in batch])
        logits = forward_logits(snapshot, images).logits
        chunks.append(T.sigmoid(logits).data)
    return np.concatenate(chunks, axis=0)


def run_dpl(
    snapshot: ModelState,
    items: list,
    old_classes: list,
    n_all_classes: int,
    dpl_config: DplConfig,
    batch_size: int = 64,
) -> PseudoLabelReport:
    """Restore old-class labels onto the session's items (mutates them)."""
    scores = _score_old_classes(snapshot, items, batch_size)
    col_of = {cls: k for k, cls in enumerate(old_classes)}
    exclude = [{col_of[c] for c in it.visible if c in col_of} for it in items]
    mu_t = session_target(len(old_classes), n_all_classes, dpl_config.mu)
    report = dynamic_threshold_search(scores, dpl_config, mu_t, exclude=exclude)
    for it, cols in zip(items, report.label_sets):
        it.pseudo = {old_classes[k] for k in cols}
    return report


def _targets(items, order_map: dict, n_outputs: int) -> np.ndarray:
    y = np.zeros((len(items), n_outputs))
    for i, it in enumerate(items):
        for cls in it.visible | it.pseudo:
            col = order_map.get(cls)
            if col is not None:
                y[i, col] = 1.0
    return y


def evaluate_cumulative(model: ModelState, plan: SessionPlan, t: int, test: Dataset, batch_size: int = 64) -> MetricsRecord:
    """Score the union of test sets 1..t over every class seen so far."""
    indices = []
    for s in range(t):
        indices.extend(plan.test_indices[s])
    classes = plan.classes_through(t)
    scores = []
    for lo in range(0, len(indices), batch_size):
        batch = indices[lo : lo + batch_size]
        images = test.features_array(batch)
        scores.append(T.sigmoid(forward_logits(model, images).logits).data)
    truths = test.truth_matrix(classes)[indices]
    return evaluate(EvalBatch(np.concatenate(scores, axis=0), truths), session=t)


def train_session(
    model: ModelState,
    plan: SessionPlan,
    t: int,
    train: Dataset,
    test: Dataset,
    buffer: RehearsalBuffer,
    snapshot: Optional[ModelState],
    config: TrainConfig,
    rngs: dict,
) -> SessionOutcome:
    """Run one full session and return its outcome (model/buffer mutate in place)."""
    if not 1 <= t <= plan.n_sessions:
        raise ValueError(f"session {t} outside plan with {plan.n_sessions} sessions")
    if t >= 2 and snapshot is None and (model.flags.use_dpl or model.flags.use_ica or model.flags.use_kd):
        raise ValueError("sessions after the first need the previous model snapshot")

    expand_for_session(model, len(plan.session_classes[t - 1]), rngs["init"])
    items = _session_items(plan, train, t, buffer)
    if not items:
        raise ValueError(f"session {t} has no training examples")

    classes_now = plan.classes_through(t)
    col_of = {cls: k for k, cls in enumerate(classes_now)}
    old_classes = plan.classes_through(t - 1)

    dpl_report = None
    if model.flags.use_dpl and t >= 2:
        dpl_report = run_dpl(
            snapshot, items, old_classes, len(plan.class_order), config.dpl,
            batch_size=config.batch_size * 4,
        )

    pseudo_recall = _pseudo_recall(items, train, set(old_classes)) if dpl_report else None

    targets = _targets(items, col_of, len(classes_now))
    features = np.stack([it.features for it in items])
    use_token = model.flags.use_ica and t >= 2
    use_kd = model.flags.use_kd and t >= 2

    opt = Adam(model.trainable_parameters(), lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    shuffle_rng = rngs["shuffle"]
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(len(items))
        for lo in range(0, len(order), config.batch_size):
            sel = order[lo : lo + config.batch_size]
            images = features[sel]
            y = targets[sel]
            e_prev = pooled_prev = None
            if use_token or use_kd:
                prev_out = forward_logits(snapshot, images)  # no tape: constants
                e_prev = prev_out.embeddings
                pooled_prev = prev_out.pooled
            with Tape() as tape:
                out = forward_logits(model, images)
                loss = total_loss(
                    asl_loss(T.sigmoid(out.logits), y, config.loss),
                    token_loss(e_prev, out.embeddings, config.loss.per_session_average)
                    if use_token else None,
                    config.loss,
                    session=t,
                )
                if use_kd:
                    loss = T.add(loss, kd_pooled_loss(pooled_prev, out.pooled))
            backward(loss)
            opt.step()
            opt.zero_grad()
            tape.clear()

    current_items = [
        (it.image_id, it.features, it.visible & set(plan.session_classes[t - 1]))
        for it in items
        if it.dataset_index >= 0
    ]
    buffer.update(plan.session_classes[t - 1], current_items, rngs["buffer"])

    record = evaluate_cumulative(model, plan, t, test)
    return SessionOutcome(
        metrics=record,
        dpl_report=dpl_report,
        pseudo_recall=pseudo_recall,
        snapshot=snapshot_model(model),
    )


def _pseudo_recall(items, train: Dataset, old_classes: set) -> Optional[float]:
    """Share of truly-present old-class signals restored as pseudo labels.

    Audited against generator ground truth on current-session images only
    (exemplars carry their old labels as annotations already).
    """
    hits = 0
    total = 0
    for it in items:
        if it.dataset_index < 0 or it.is_exemplar:
            continue
        truth_old = train.examples[it.dataset_index].labels & old_classes
        truth_old -= it.visible  # annotated ones need no restoring
        total += len(truth_old)
        hits += len(truth_old & it.pseudo)
    return hits / total if total else None


# ---------------------------------------------------------------------------
# checkpoints: magic, manifest of named shapes, little-endian f32 payloads


def save_checkpoint(model: ModelState, path: str) -> None:
    named = model.named_parameters()
    manifest = "".join(
        f"{name} {','.join(str(s) for s in tensor.shape)}\n" for name, tensor in named
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for _, tensor in named:
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> dict:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        (manifest_len,) = struct.unpack("<I", fh.read(4))
        manifest = fh.read(manifest_len).decode("utf-8")
        params = {}
        for line in manifest.splitlines():
            name, shape_txt = line.rsplit(" ", 1)
            shape = tuple(int(s) for s in shape_txt.split(",") if s)
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise ValueError(f"{path}: truncated payload for {name}")
            params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after payload")
    return params


def apply_checkpoint(model: ModelState, params: dict) -> None:
    for name, tensor in model.named_parameters():
        if name not in params:
            raise ValueError(f"checkpoint missing parameter {name}")
        if params[name].shape != tensor.shape:
            raise ValueError(
                f"checkpoint shape {params[name].shape} != model shape {tensor.shape} for {name}"
            )
        tensor.data = params[name].copy()


# ---------------------------------------------------------------------------
# full incremental run


def run_incremental(
    train: Dataset,
    test: Dataset,
    plan: SessionPlan,
    flags: ArmFlags,
    ica_config: IcaConfig,
    config: TrainConfig,
    master_seed: int,
) -> list:
    """Train through every session of the plan; returns per-session outcomes."""
    from .seeds import substream_rng

    if not plan.train_indices:
        assign_examples(plan, train, test)
    rngs = {name: substream_rng(master_seed, name) for name in ("init", "shuffle", "buffer")}
    model = init_model(
        (train.grid_h, train.grid_w, train.channels),
        ica_config,
        flags,
        rngs["init"],
        extractor_width=config.extractor_width,
        pos_enc_scale=config.pos_enc_scale,
    )
    buffer = RehearsalBuffer(flags.buffer_policy)
    snapshot = None
    outcomes = []
    for t in range(1, plan.n_sessions + 1):
        outcome = train_session(model, plan, t, train, test, buffer, snapshot, config, rngs)
        snapshot = outcome.snapshot
        outcomes.append(outcome)
    return outcomes
