"""Training, evaluation, ablations and run reports."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import autodiff as ad
from .autodiff import Params, Tape
from .checkpoint import check_compatible, load_checkpoint, save_checkpoint
from .config import TrainConfig, dump_config
from .edge_branch import EDGE_FUNCTIONS
from .geom import PointCloud, load_point_cloud, random_scene_spec, sample_block, synth_scene, tile_blocks
from .losses import EvalAccumulator, Metrics, edge_labels, edge_loss, format_metrics, metrics, point_loss, total_loss
from .point_branch import GRAPH_MODES, MESSAGE_PASSING, ForwardResult, forward, init_params

log = logging.getLogger(__name__)

ABLATION_AXES = {
    "edge_function": ("edge_function", EDGE_FUNCTIONS),
    "message_passing": ("message_passing", ("adaaggre_softmax", "adaaggre_nosoftmax", "maxpool_concat")),
    "graph_mode": ("graph_mode", GRAPH_MODES),
}


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data


def synthetic_scene(cfg: TrainConfig, split: str, i: int) -> PointCloud:
    d = cfg.data
    split_id = {"train": 0, "test": 1}[split]
    spec = random_scene_spec(
        [d.scene_seed, split_id, i],
        num_classes=d.num_classes,
        points_per_class=d.points_per_class,
        extent=d.extent,
        colored=d.colored,
        color_noise=d.color_noise,
        schema=d.schema,
    )
    return synth_scene(spec, rng_seed=[d.scene_seed, split_id, i, 1])


def load_split(cfg: TrainConfig, split: str) -> list[PointCloud]:
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}; expected 'train' or 'test'")
    if cfg.data.source == "synth":
        count = cfg.data.train_scenes if split == "train" else cfg.data.test_scenes
        scenes = [synthetic_scene(cfg, split, i) for i in range(count)]
    elif cfg.data.source == "files":
        files = cfg.split_files(split)
        scenes = [load_point_cloud(f, cfg.data.schema, cfg.data.num_classes) for f in files]
    else:
        raise ValueError(f"unknown data source {cfg.data.source!r}")
    if not scenes:
        raise ValueError(f"data source for split {split!r} is empty")
    return scenes


def epoch_blocks(cfg: TrainConfig, scenes: list[PointCloud], epoch: int) -> list[PointCloud]:
    """Training blocks of one epoch; depends only on the seed, never on the model."""
    rng = np.random.default_rng([cfg.seed, epoch])
    reps = -(-cfg.blocks_per_epoch // len(scenes))
    picks = np.concatenate([rng.permutation(len(scenes)) for _ in range(reps)])[: cfg.blocks_per_epoch]
    return [
        sample_block(scenes[s], cfg.block.block_size, cfg.block.padding, cfg.n_points, [cfg.seed, epoch, b])
        for b, s in enumerate(picks)
    ]


# ---------------------------------------------------------------------------
# losses per block


@dataclass
class BlockLoss:
    result: ForwardResult
    point: ad.Tensor
    edge: ad.Tensor
    total: ad.Tensor
    edge_correct: int
    edge_count: int


def block_loss(cfg: TrainConfig, block: PointCloud, params: Params) -> BlockLoss:
    res = forward(cfg.network, block, params)
    finest = res.hier.layers[-1]
    y = edge_labels(finest, block.labels)
    preds = res.edge_preds
    if not cfg.loss.include_self_edges:
        keep = np.flatnonzero(finest.src != finest.dst)
        preds, y = ad.gather_rows(preds, keep), y[keep]
    lp = point_loss(res.refined, block.labels)
    le = edge_loss(preds, y, cfg.loss.alpha)
    correct = int(np.sum((preds.data.reshape(-1) > 0.5) == (y > 0.5)))
    return BlockLoss(res, lp, le, total_loss(lp, le, cfg.loss), correct, len(y))


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochStats:
    epoch: int
    lr: float
    point_loss: float
    edge_loss: float
    total_loss: float
    edge_acc: float


@dataclass
class RunRecord:
    epochs: list[EpochStats] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    config_text: str = ""
    checkpoints: list[str] = field(default_factory=list)
    params: Params | None = None


def train(cfg: TrainConfig, out_dir=None, params: Params | None = None, progress=None) -> RunRecord:
    """Train with SGD + momentum and a step learning-rate schedule.

    Blocks within a batch are processed one after another and their
    gradients summed in block order, then averaged, before each step.
    """
    t0 = time.perf_counter()
    scenes = load_split(cfg, "train")
    params = init_params(cfg.network, cfg.seed) if params is None else params
    opt = ad.SGD(params, cfg.base_lr, cfg.momentum, cfg.weight_decay)
    record = RunRecord(config_text=dump_config(cfg), params=params)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        blocks = epoch_blocks(cfg, scenes, epoch)
        sums = np.zeros(3)
        correct = count = 0
        for step, start in enumerate(range(0, len(blocks), cfg.batch_size)):
            batch = blocks[start : start + cfg.batch_size]
            params.zero_grad()
            for block in batch:
                with Tape() as tape:
                    bl = block_loss(cfg, block, params)
                tape.backward(bl.total)
                vals = np.array([float(bl.point.data), float(bl.edge.data), float(bl.total.data)])
                if not np.all(np.isfinite(vals)):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}: {vals}")
                sums += vals
                correct += bl.edge_correct
                count += bl.edge_count
            grads = {k: t.grad / len(batch) for k, t in params.items() if t.grad is not None}
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite gradient at epoch {epoch}, step {step}")
            opt.step(grads)
        n = len(blocks)
        stats = EpochStats(epoch, opt.lr, sums[0] / n, sums[1] / n, sums[2] / n, correct / max(count, 1))
        record.epochs.append(stats)
        if progress is not None:
            progress(stats)
        log.info("epoch %d lr %.6g loss %.5f (point %.5f edge %.5f) edge_acc %.4f", epoch, stats.lr,
                 stats.total_loss, stats.point_loss, stats.edge_loss, stats.edge_acc)
        if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            path = out / f"checkpoint_epoch{epoch + 1:04d}.ckpt"
            save_checkpoint(params, path)
            record.checkpoints.append(str(path))
    if out is not None:
        path = out / "final.ckpt"
        save_checkpoint(params, path)
        record.checkpoints.append(str(path))
    record.wall_clock = time.perf_counter() - t0
    return record


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    metrics: Metrics
    accumulator: EvalAccumulator
    edge_acc: float
    predictions: list[np.ndarray]
    votes_per_point: list[np.ndarray]

    def report(self) -> str:
        return format_metrics(self.metrics, extra={"EdgeAcc": self.edge_acc})

    def as_dict(self) -> dict:
        return {"oa": self.metrics.oa, "macc": self.metrics.macc, "miou": self.metrics.miou,
                "edge_acc": self.edge_acc}


def predict_scene(cfg: TrainConfig, scene: PointCloud, params: Params):
    """Class votes for every point of a scene from tiled blocks.

    Returns ``(prediction, vote_count, edge_correct, edge_count)``; a point
    seen in several blocks takes the class with the largest summed softmax.
    """
    votes = np.zeros((len(scene), cfg.network.num_classes))
    seen = np.zeros(len(scene), dtype=np.int64)
    correct = count = 0
    blocks = tile_blocks(scene, cfg.block.block_size, cfg.block.padding, cfg.n_points,
                         cfg.block.eval_stride, rng_seed=[cfg.seed, 7])
    for block in blocks:
        res = forward(cfg.network, block, params)
        prob = ad.softmax_rows(res.refined).data
        np.add.at(votes, block.source_index, prob)
        np.add.at(seen, block.source_index, 1)
        if block.labels is not None:
            y = edge_labels(res.hier.layers[-1], block.labels)
            correct += int(np.sum((res.edge_preds.data.reshape(-1) > 0.5) == (y > 0.5)))
            count += len(y)
    return votes.argmax(axis=1), seen, correct, count


def evaluate(cfg: TrainConfig, checkpoint, split: str = "test") -> EvalResult:
    """Score every point of a split. ``checkpoint`` is a path or a Params mapping."""
    expected = init_params(cfg.network, cfg.seed)
    if isinstance(checkpoint, (str, Path)):
        params = load_checkpoint(checkpoint)
        check_compatible(params, expected)
    else:
        params = checkpoint
        check_compatible(params, expected)
    acc = EvalAccumulator(cfg.network.num_classes)
    preds, seen_all = [], []
    correct = count = 0
    for scene in load_split(cfg, split):
        if scene.labels is None:
            raise ValueError("evaluation needs labeled scenes")
        pred, seen, c, n = predict_scene(cfg, scene, params)
        acc.add(pred, scene.labels)
        preds.append(pred)
        seen_all.append(seen)
        correct += c
        count += n
    return EvalResult(metrics(acc), acc, correct / max(count, 1), preds, seen_all)


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationReport:
    axis: str
    rows: list[tuple[str, dict]]

    def table(self) -> str:
        lines = [f"{'variant':<22}  {'mIoU':>8}  {'mAcc':>8}  {'OA':>8}  {'EdgeAcc':>8}"]
        for name, m in self.rows:
            lines.append(f"{name:<22}  {m['miou']:8.4f}  {m['macc']:8.4f}  {m['oa']:8.4f}  {m['edge_acc']:8.4f}")
        return "\n".join(lines) + "\n"


def ablate(cfg: TrainConfig, axis: str, out_dir=None, progress=None) -> AblationReport:
    """Train and evaluate one model per variant of ``axis`` with shared seed and data."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {sorted(ABLATION_AXES)}")
    key, variants = ABLATION_AXES[axis]
    rows = []
    for variant in variants:
        vcfg = cfg.with_network(**{key: variant})
        sub = None if out_dir is None else Path(out_dir) / variant
        record = train(vcfg, sub)
        result = evaluate(vcfg, record.params, "test")
        rows.append((variant, result.as_dict()))
        if progress is not None:
            progress(variant, result)
    report = AblationReport(axis, rows)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / f"ablation_{axis}.txt").write_text(report.table(), encoding="utf-8")
    return report


# ---------------------------------------------------------------------------
# gradient check driver


def run_gradcheck(cfg: TrainConfig, eps: float = 1e-5) -> ad.GradCheckReport:
    """Check the full loss gradient of ``cfg``'s network on one training block.

    Parameters are jittered by ``cfg.grad_jitter`` first so that no ReLU sits
    exactly on its kink (zero biases put whole dead rows there).
    """
    scenes = load_split(cfg, "train")
    block = sample_block(scenes[0], cfg.block.block_size, cfg.block.padding, cfg.n_points, [cfg.seed, 99])
    params = init_params(cfg.network, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 98])
    for t in params.values():
        t.data = t.data + rng.uniform(-cfg.grad_jitter, cfg.grad_jitter, t.data.shape)
    return ad.gradient_errors(lambda: block_loss(cfg, block, params).total, params, eps)


# ---------------------------------------------------------------------------
# reports


def loss_csv(record: RunRecord) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "lr", "point_loss", "edge_loss", "total_loss", "edge_acc"])
    for s in record.epochs:
        w.writerow([s.epoch, repr(s.lr), repr(s.point_loss), repr(s.edge_loss), repr(s.total_loss), repr(s.edge_acc)])
    return buf.getvalue()


def loss_svg(record: RunRecord, width: int = 640, height: int = 360) -> str:
    """Line plot of the three loss curves as standalone SVG."""
    pad = 48
    series = {
        "total": ([s.total_loss for s in record.epochs], "#1f77b4"),
        "point": ([s.point_loss for s in record.epochs], "#2ca02c"),
        "edge": ([s.edge_loss for s in record.epochs], "#d62728"),
    }
    ys = np.concatenate([np.asarray(v) for v, _ in series.values()])
    lo, hi = float(ys.min()), float(ys.max())
    hi = hi if hi > lo else lo + 1.0
    n = len(record.epochs)

    def pt(i, v):
        x = pad + (width - 2 * pad) * (i / max(n - 1, 1))
        y = height - pad - (height - 2 * pad) * ((v - lo) / (hi - lo))
        return f"{x:.2f},{y:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" font-size="12">epoch</text>',
        f'<text x="{pad}" y="{pad - 8}" font-size="11">{hi:.4g}</text>',
        f'<text x="{pad}" y="{height - pad + 14}" font-size="11">{lo:.4g}</text>',
    ]
    for k, (name, (vals, color)) in enumerate(series.items()):
        pts = " ".join(pt(i, v) for i, v in enumerate(vals))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(
            f'<text x="{width - pad - 60}" y="{pad + 14 * k}" fill="{color}" font-size="12">{escape(name)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_report(record: RunRecord, out_dir, plot: bool = True) -> list[Path]:
    """Write loss curves (CSV, optional SVG), the metrics table and the config snapshot."""
    if not record.epochs:
        raise ValueError("run record has no epochs")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    written = []

    def put(name, text):
        path = out / name
        path.write_text(text, encoding="utf-8")
        written.append(path)

    put("loss_curve.csv", loss_csv(record))
    put("config.ini", record.config_text)
    if record.evals:
        blocks = []
        for ev in record.evals:
            blocks.append(f"[{ev.get('split', 'eval')}]\n{ev['report']}")
        put("metrics.txt", "\n".join(blocks))
    if plot:
        put("losses.svg", loss_svg(record))
    return written
