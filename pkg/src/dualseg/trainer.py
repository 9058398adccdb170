"""Joint optimisation loop: supervised + pseudo-label + consistency + weight regulariser.

One step encodes the labeled and unlabeled batches with the shared encoder,
builds pseudo-labels from the (gradient-free) teacher heads, computes the
class weights, runs a single backward pass on the weighted total, takes one
momentum-SGD step on encoder, student head and weight generator, and finally
moves the teachers by EMA.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .ema import EmaConfig, TeacherPair
from .losses import (
    LossBreakdown,
    LossWeights,
    consistency_loss,
    pseudo_label_loss,
    supervised_ce,
    total_loss,
    weight_regularizer,
)
from .metrics import MetricsHistory, miou, pixel_accuracy
from .nets import FeatureBatch, ModelDims, ModelParams, cwt_forward, encode, head_forward, init_params
from .pseudo import PseudoLabelBatch, consensus, softmax_np, threshold_labels
from .synthdata import SceneBatch, SceneSplit, WeatherConfig, make_split
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

VARIANTS = ("STB", "STFW", "DTFW", "DTC", "COMPLETE")


class NumericAbort(RuntimeError):
    """A loss component became non-finite."""

    def __init__(self, component: str, dump: dict):
        super().__init__(f"non-finite {component} loss at step {dump.get('step')}")
        self.component = component
        self.dump = dump


@dataclass(frozen=True)
class BatchSpec:
    B_L: int = 4
    B_U: int = 4

    def __post_init__(self) -> None:
        if self.B_L < 1 or self.B_U < 0:
            raise ValueError(f"need B_L >= 1 and B_U >= 0, got {self.B_L}, {self.B_U}")

    @property
    def B(self) -> int:
        return self.B_L + self.B_U


@dataclass(frozen=True)
class DataSpec:
    n_train: int = 96
    labeled_ratio: float = 0.125
    betas: tuple[float, ...] = (0.2, 0.5, 0.7)
    n_eval: int = 48


@dataclass(frozen=True)
class TrainConfig:
    dims: ModelDims = field(default_factory=ModelDims)
    weights: LossWeights = field(default_factory=LossWeights)
    ema: EmaConfig = field(default_factory=EmaConfig)
    tau: float = 0.95
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 10
    steps_per_epoch: int = 10
    batch: BatchSpec = field(default_factory=BatchSpec)
    data: DataSpec = field(default_factory=DataSpec)
    seed: int = 0
    variant: str = "COMPLETE"

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise ValueError(f"learning rate must be nonnegative, got {self.lr}")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be at least 1")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"]["betas"] = list(self.data.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for key, typ in (
            ("dims", ModelDims),
            ("weights", LossWeights),
            ("ema", EmaConfig),
            ("batch", BatchSpec),
        ):
            if key in d:
                kw[key] = typ(**d.pop(key))
        if "data" in d:
            data = dict(d.pop("data"))
            if "betas" in data:
                data["betas"] = tuple(float(b) for b in data["betas"])
            kw["data"] = DataSpec(**data)
        return cls(**kw, **d)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        raw = json.loads(Path(path).read_text())
        # a run manifest carries its config under "config"
        return cls.from_dict(raw.get("config", raw) if isinstance(raw, dict) else raw)


# --- variants -----------------------------------------------------------------


@dataclass(frozen=True)
class Wiring:
    variant: str
    teachers: int
    pseudo_source: str | None  # None, "teacher1" or "consensus"
    consistency: bool
    cwt: bool


def make_variant(cfg: TrainConfig) -> Wiring:
    table = {
        "STB": Wiring("STB", 0, None, False, False),
        "STFW": Wiring("STFW", 1, "teacher1", False, False),
        "DTFW": Wiring("DTFW", 2, "teacher1", True, False),
        "DTC": Wiring("DTC", 2, "consensus", True, False),
        "COMPLETE": Wiring("COMPLETE", 2, "consensus", True, True),
    }
    try:
        return table[cfg.variant]
    except KeyError:
        raise ValueError(f"unknown variant {cfg.variant!r}") from None


# --- state --------------------------------------------------------------------


@dataclass
class TrainState:
    params: ModelParams
    teachers: TeacherPair
    velocity: dict[str, np.ndarray]
    step: int = 0
    loss_rows: list[dict] = field(default_factory=list)
    history: MetricsHistory = field(default_factory=MetricsHistory)

    def optimized(self, wiring: Wiring) -> dict[str, Tensor]:
        groups = ["encoder", "student"] + (["cwt"] if wiring.cwt else [])
        return {k: v for k, v in self.params.named_tensors().items() if k.split(".")[0] in groups}


def init_state(cfg: TrainConfig) -> TrainState:
    params = init_params(cfg.dims, cfg.seed)
    teachers = TeacherPair.from_student(params.student, cfg.seed)
    params.teacher1, params.teacher2 = teachers.first, teachers.second
    state = TrainState(params=params, teachers=teachers, velocity={})
    state.velocity = {k: np.zeros_like(v.data) for k, v in state.optimized(make_variant(cfg)).items()}
    return state


# --- forward ------------------------------------------------------------------


@dataclass
class ForwardResult:
    ce: Tensor
    pl: Tensor
    consist: Tensor
    reg: Tensor
    w_class: Tensor
    pseudo: PseudoLabelBatch | None
    trace: list[str]
    flags: list[str]


def model_input(images: np.ndarray) -> Tensor:
    """Map [0, 1] pixel values to [-1, 1]; keeps the first ReLU layer away from the all-positive corner."""
    return Tensor((np.asarray(images) - 0.5) * 2.0)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape))


def forward(
    params: ModelParams,
    labeled_images: np.ndarray,
    labeled_masks: np.ndarray,
    unlabeled_images: np.ndarray,
    cfg: TrainConfig,
    wiring: Wiring,
    tau: float | None = None,
) -> ForwardResult:
    """Build every loss component on the current tape."""
    tau = cfg.tau if tau is None else tau
    trace: list[str] = []
    flags: list[str] = []
    n_l = len(labeled_images)
    n_u = len(unlabeled_images) if wiring.teachers else 0
    images = labeled_images if n_u == 0 else np.concatenate([labeled_images, unlabeled_images])
    feats = encode(params.encoder, model_input(images))
    trace.append("encode")
    logits = head_forward(params.student, feats)
    trace.append("student_head")
    c = logits.shape[-1]

    if wiring.cwt:
        h_s = feats.pooled
        # teacher heads share the encoder, so each teacher's features are the pooled encoder output
        h_t = T.concat([feats.pooled, feats.pooled])
        w_class = cwt_forward(params.cwt, h_s, h_t)
        trace.append("cwt")
    else:
        w_class = _ones((len(images), c))
        trace.append("fixed_weights")

    logits_l = T.slice_axis(logits, 0, n_l, axis=0)
    w_l = T.slice_axis(w_class, 0, n_l, axis=0)
    ce = supervised_ce(logits_l, w_l, labeled_masks)
    trace.append("ce")

    zero = Tensor(0.0)
    pl, consist, pseudo = zero, zero, None
    if n_u:
        feats_u = T.slice_axis(feats.pixels, n_l, n_l + n_u, axis=0)
        fb_u = FeatureBatch(pixels=feats_u, pooled=T.mean(feats_u, axis=(1, 2)))
        t1 = head_forward(params.teacher1, fb_u)
        trace.append("teacher1_head")
        p1 = softmax_np(t1.data)
        if wiring.teachers == 2:
            t2 = head_forward(params.teacher2, fb_u)
            trace.append("teacher2_head")
        if wiring.pseudo_source == "consensus":
            p_src = consensus(p1, softmax_np(t2.data))
            trace.append("pseudo:consensus")
        else:
            p_src = p1
            trace.append("pseudo:teacher1")
        pseudo = threshold_labels(p_src, tau)
        pl, empty = pseudo_label_loss(
            T.slice_axis(logits, n_l, n_l + n_u, axis=0), T.slice_axis(w_class, n_l, n_l + n_u, axis=0), pseudo
        )
        trace.append("pl")
        if empty:
            flags.append("empty_mask")
        if wiring.consistency:
            consist, empty_u = consistency_loss(t1, t2, n_u)
            trace.append("consist")
            if empty_u:
                flags.append("empty_unlabeled")
    elif wiring.teachers:
        flags.append("empty_unlabeled")

    reg = weight_regularizer(w_class) if wiring.cwt else zero
    if wiring.cwt:
        trace.append("reg")
    return ForwardResult(ce, pl, consist, reg, w_class, pseudo, trace, flags)


def effective_weights(cfg: TrainConfig, wiring: Wiring) -> LossWeights:
    """Loss weights with the components a variant does not use switched off."""
    w = cfg.weights
    return LossWeights(
        lambda1=w.lambda1 if wiring.pseudo_source else 0.0,
        lambda2=w.lambda2 if wiring.consistency else 0.0,
        lambda3=w.lambda3 if wiring.cwt else 0.0,
    )


# --- step ---------------------------------------------------------------------


def sgd_momentum(params: dict[str, Tensor], velocity: dict[str, np.ndarray], lr: float, momentum: float) -> None:
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        v = momentum * velocity[name] + g
        velocity[name] = v
        p.data = p.data - lr * v


def train_step(
    state: TrainState, labeled: SceneBatch, unlabeled: SceneBatch, cfg: TrainConfig
) -> tuple[TrainState, LossBreakdown]:
    wiring = make_variant(cfg)
    lw = effective_weights(cfg, wiring)
    optimized = state.optimized(wiring)
    teacher_ids = {id(t) for h in (state.params.teacher1, state.params.teacher2) for t in h.tensors().values()}
    assert not teacher_ids & {id(t) for t in optimized.values()}, "teacher parameters in the optimizer set"

    with Tape() as tape:
        for p in optimized.values():
            p.grad = None
        fwd = forward(
            state.params, labeled.images, labeled.training_masks(), unlabeled.images, cfg, wiring
        )
        total = total_loss(fwd.ce, fwd.pl, fwd.consist, fwd.reg, lw)
        parts = {"ce": fwd.ce, "pl": fwd.pl, "consist": fwd.consist, "reg": fwd.reg, "total": total}
        for name, t in parts.items():
            if not np.isfinite(t.data):
                raise NumericAbort(
                    name,
                    {"step": state.step, **{k: float(v.data) for k, v in parts.items()}},
                )
        if total.requires_grad:
            tape.backward(total)

    sgd_momentum(optimized, state.velocity, cfg.lr, cfg.momentum)

    if wiring.teachers:
        state.teachers.update(state.params.student, cfg.ema, state.step, active=wiring.teachers)
    state.params.teacher1, state.params.teacher2 = state.teachers.first, state.teachers.second

    mask_fraction = fwd.pseudo.mask_fraction if fwd.pseudo is not None else 0.0
    n_conf = int(fwd.pseudo.mask.sum()) if fwd.pseudo is not None else 0
    ce, pl, cons, reg = (float(t.data) for t in (fwd.ce, fwd.pl, fwd.consist, fwd.reg))
    breakdown = LossBreakdown(
        ce=ce,
        pl=pl,
        consist=cons,
        reg=reg,
        total=float(total.data),
        n_labeled=len(labeled),
        n_unlabeled=len(unlabeled) if wiring.teachers else 0,
        n_confident=n_conf,
        mask_fraction=mask_fraction,
        flags=fwd.flags,
    )
    state.loss_rows.append(breakdown.row(state.step))
    state.step += 1
    return state, breakdown


# --- gradient shares ----------------------------------------------------------

SHARE_KEYS = ("ce", "pl", "consist", "reg")


def grad_share_report(
    state: TrainState, labeled: SceneBatch, unlabeled: SceneBatch, cfg: TrainConfig
) -> tuple[dict[str, float], bool]:
    """Share of the encoder gradient norm contributed by each weighted loss term.

    Runs one backward pass per component.  Returns ``(shares, undefined)``;
    ``undefined`` is set (and all shares are 0) when every component gradient vanishes.
    """
    wiring = make_variant(cfg)
    lw = effective_weights(cfg, wiring)
    lam = {"ce": 1.0, "pl": lw.lambda1, "consist": lw.lambda2, "reg": lw.lambda3}
    enc = list(state.params.encoder.tensors().values())
    norms = {}
    for key in SHARE_KEYS:
        with Tape() as tape:
            for p in enc:
                p.grad = None
            fwd = forward(state.params, labeled.images, labeled.training_masks(), unlabeled.images, cfg, wiring)
            part = T.scale(getattr(fwd, key), lam[key])
            if lam[key] == 0.0 or not part.requires_grad:
                norms[key] = 0.0
                continue
            tape.backward(part)
            norms[key] = float(np.sqrt(sum(float((p.grad**2).sum()) for p in enc if p.grad is not None)))
    total = sum(norms.values())
    if total == 0.0:
        return {k: 0.0 for k in SHARE_KEYS}, True
    return {k: v / total for k, v in norms.items()}, False


# --- driver -------------------------------------------------------------------

METRIC_COLUMNS = [
    "epoch",
    "miou",
    "pixel_acc",
    "ce",
    "pl",
    "consist",
    "reg",
    "total",
    "mask_fraction",
    "share_ce",
    "share_pl",
    "share_consist",
    "share_reg",
    "w_dev",
]

EVAL_SEED_OFFSET = 1_000_003


class Trainer:
    """Owns the data split, the training state and the epoch schedule."""

    def __init__(self, cfg: TrainConfig, state: TrainState | None = None):
        self.cfg = cfg
        self.wiring = make_variant(cfg)
        modes = [WeatherConfig(beta=b) for b in cfg.data.betas]
        self.split: SceneSplit = make_split(cfg.data.n_train, cfg.data.labeled_ratio, modes, cfg.seed, cfg.dims)
        self.eval_split: SceneSplit = make_split(
            cfg.data.n_eval, 1.0, modes, cfg.seed + EVAL_SEED_OFFSET, cfg.dims
        )
        if not self.split.labeled_index:
            raise ValueError("the labeled split is empty; raise n_train or labeled_ratio")
        self.state = state if state is not None else init_state(cfg)

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.cfg.steps_per_epoch

    def batches_for(self, step: int) -> tuple[SceneBatch, SceneBatch]:
        rng = np.random.default_rng([self.cfg.seed, step, 0xBA7C])
        lab, unl = self.split.labeled_index, self.split.unlabeled_index
        bl, bu = self.cfg.batch.B_L, self.cfg.batch.B_U
        li = rng.choice(lab, size=bl, replace=bl > len(lab))
        if bu and unl:
            ui = rng.choice(unl, size=bu, replace=bu > len(unl))
        else:
            ui = np.array([], dtype=np.int64)
        return self.split.batch([int(i) for i in li]), self.split.batch([int(i) for i in ui])

    def step(self) -> LossBreakdown:
        labeled, unlabeled = self.batches_for(self.state.step)
        _, breakdown = train_step(self.state, labeled, unlabeled, self.cfg)
        return breakdown

    def predict(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Hard predictions and the class weights used for them."""
        p = self.state.params
        with T.no_grad():
            feats = encode(p.encoder, model_input(images))
            logits = head_forward(p.student, feats).data
            if self.wiring.cwt:
                w = cwt_forward(p.cwt, feats.pooled, T.concat([feats.pooled, feats.pooled])).data
            else:
                w = np.ones((len(images), logits.shape[-1]))
        return np.argmax(logits * w[:, None, None, :], axis=-1), w

    def evaluate(self, split: SceneSplit | None = None) -> dict:
        split = split or self.eval_split
        bsz = self.cfg.batch.B
        preds, truths, devs = [], [], []
        for lo in range(0, len(split), bsz):
            batch = split.batch(range(lo, min(lo + bsz, len(split))))
            pred, w = self.predict(batch.images)
            preds.append(pred)
            truths.append(batch.reveal_masks())
            devs.append(np.linalg.norm(w - 1.0, axis=1))
        pred, truth = np.concatenate(preds), np.concatenate(truths)
        return {
            "miou": miou(pred, truth, self.cfg.dims.C),
            "pixel_acc": pixel_accuracy(pred, truth),
            "w_dev": float(np.concatenate(devs).mean()),
        }

    def _epoch_row(self, epoch: int) -> dict:
        spe = self.cfg.steps_per_epoch
        rows = self.state.loss_rows[-spe:]
        row = {"epoch": epoch, **self.evaluate()}
        for key in ("ce", "pl", "consist", "reg", "total", "mask_fraction"):
            row[key] = float(np.mean([r[key] for r in rows]))
        shares, _ = grad_share_report(self.state, *self.batches_for(self.state.step - 1), self.cfg)
        for k, v in shares.items():
            row[f"share_{k}"] = v
        return {c: row[c] for c in METRIC_COLUMNS}

    def fit(self, until_step: int | None = None) -> MetricsHistory:
        stop = self.total_steps if until_step is None else min(until_step, self.total_steps)
        while self.state.step < stop:
            self.step()
            if self.state.step % self.cfg.steps_per_epoch == 0:
                epoch = self.state.step // self.cfg.steps_per_epoch
                row = self._epoch_row(epoch)
                self.state.history.append(row)
                log.info(
                    "%s seed=%d epoch=%d miou=%.4f loss=%.4f",
                    self.cfg.variant,
                    self.cfg.seed,
                    epoch,
                    row["miou"],
                    row["total"],
                )
        return self.state.history

    # --- checkpoints ---

    def save(self, path: str | Path) -> None:
        s = self.state
        arrays = {f"param/{k}": v.data for k, v in s.params.named_tensors().items() if not k.startswith("teacher")}
        for tag, head in (("teacher1", s.teachers.first), ("teacher2", s.teachers.second)):
            for k, v in head.tensors().items():
                arrays[f"param/{tag}.{k}"] = v.data
        for k, v in s.velocity.items():
            arrays[f"velocity/{k}"] = v
        header = {
            "dims": self.cfg.dims.to_dict(),
            "seed": self.cfg.seed,
            "step": s.step,
            "config": self.cfg.to_dict(),
            "teacher_last_step": s.teachers.last_step,
            "loss_rows": s.loss_rows,
            "history": s.history.rows,
        }
        checkpoint.save(path, header, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "Trainer":
        header, arrays = checkpoint.load(path)
        cfg = TrainConfig.from_dict(header["config"])
        state = init_state(cfg)
        named = state.params.named_tensors()
        for name, arr in arrays.items():
            kind, key = name.split("/", 1)
            if kind == "param" and not key.startswith("teacher"):
                named[key].data = arr.copy()
            elif kind == "velocity":
                state.velocity[key] = arr.copy()
        for tag in ("teacher1", "teacher2"):
            head = getattr(state.teachers, "first" if tag == "teacher1" else "second")
            head.weight.data = arrays[f"param/{tag}.weight"].copy()
            head.bias.data = arrays[f"param/{tag}.bias"].copy()
        state.params.teacher1, state.params.teacher2 = state.teachers.first, state.teachers.second
        state.teachers.last_step = header["teacher_last_step"]
        state.step = header["step"]
        state.loss_rows = list(header["loss_rows"])
        state.history = MetricsHistory(rows=list(header["history"]))
        return cls(cfg, state)


def run(cfg: TrainConfig) -> MetricsHistory:
    return Trainer(cfg).fit()
