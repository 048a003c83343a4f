"""Desk-scale training loop: AdamW with split learning rates over the three
networks, per-step CSV logging, and atomic resumable checkpoints.

Determinism contract: given the same TrainConfig (seed included) and the
same dataset files, two runs write bitwise-identical final checkpoints.
Everything stochastic flows from `np.random.default_rng` seeded by the
config: parameter init from `seed`, the visit order of epoch e from
`[seed, e]`.  There is no augmentation and no dropout at desk scale.
"""

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .decoder import Decoder
from .encoder import Encoder, EncoderConfig
from .geometry import DepthRange
from .losses import ALPHA, LAMBDA_SMOOTH, LossReport, total_loss
from .posenet import PoseNet, se3_exp
from .synthdata import load_dataset

LOG_COLUMNS = ("step", "total", "per_scale_1", "per_scale_2", "per_scale_3",
               "per_scale_4", "photometric", "smoothness", "automask_ratio")


class NumericError(ArithmeticError):
    """Loss left the reals; training aborts naming the offending batch."""


@dataclass
class TrainConfig:
    data_dir: str
    out_dir: str
    epochs: int = 10
    batch_size: int = 2
    lr_posenet_decoder: float = 1e-4
    lr_encoder: float = 5e-5            # encoder trains slower than the rest
    seed: int = 0
    depth_range: DepthRange = field(default_factory=lambda: DepthRange(0.1, 100.0))
    lambda_smooth: float = LAMBDA_SMOOTH
    ssim_alpha: float = ALPHA
    checkpoint_every: int = 50          # steps between snapshots; 0 = final only
    clip_grad: float = 0.0              # global-norm threshold; 0 or inf = off
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.lr_encoder > self.lr_posenet_decoder:
            raise ValueError("lr_encoder must not exceed lr_posenet_decoder")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("need batch_size >= 1 and epochs >= 0")


@dataclass
class Models:
    encoder: Encoder
    decoder: Decoder
    pose: PoseNet

    def groups(self):
        return (("encoder", self.encoder), ("decoder", self.decoder),
                ("pose", self.pose))

    def named_parameters(self):
        for prefix, mod in self.groups():
            yield from mod.named_parameters(f"{prefix}.")

    def zero_grad(self):
        for _, mod in self.groups():
            mod.zero_grad()


def build_models(cfg: TrainConfig) -> Models:
    rng = np.random.default_rng(cfg.seed)
    return Models(encoder=Encoder(cfg.encoder, rng),
                  decoder=Decoder(cfg.encoder.stage_channels, rng),
                  pose=PoseNet(rng))


class AdamW:
    """Bias-corrected adaptive moments with decoupled weight decay.

    Per parameter:  p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p),
    where m/v are exponential moving averages of g and g**2.  The decay
    term touches p directly, never the moments, and scales with lr so a
    zero learning rate leaves parameters bit-identical.
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.rows = [(name, p, lr) for name, p, lr in groups]
        names = [name for name, _, _ in self.rows]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in optimizer groups")
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p, _ in self.rows}
        self.v = {name: np.zeros_like(p.data) for name, p, _ in self.rows}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p, lr in self.rows:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)

    def state_dict(self):
        out = {"t": np.array(float(self.t))}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for name in self.m:
            self.m[name] = np.array(state[f"m.{name}"], dtype=np.float64)
            self.v[name] = np.array(state[f"v.{name}"], dtype=np.float64)


def param_groups(models: Models, cfg: TrainConfig):
    """Split schedule: encoder group vs pose+decoder group."""
    rows = []
    for name, p in models.encoder.named_parameters("encoder."):
        rows.append((name, p, cfg.lr_encoder))
    for prefix, mod in (("decoder.", models.decoder), ("pose.", models.pose)):
        for name, p in mod.named_parameters(prefix):
            rows.append((name, p, cfg.lr_posenet_decoder))
    return rows


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        total += float((g * g).sum())
    norm = np.sqrt(total)
    if np.isfinite(max_norm) and max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def train_step(batch, models: Models, opt: AdamW, cfg: TrainConfig,
               batch_ids=None) -> LossReport:
    """One forward/backward/update on a list of Triplets."""
    if not batch:
        raise ValueError("train_step needs a non-empty batch")
    target = Tensor(np.stack([t.target for t in batch]))
    src_fwd = Tensor(np.stack([t.src_fwd for t in batch]))
    src_bwd = Tensor(np.stack([t.src_bwd for t in batch]))

    disps = models.decoder(models.encoder(target))
    poses = [se3_exp(models.pose(ad.concat([target, src], axis=1)))
             for src in (src_fwd, src_bwd)]
    loss, report = total_loss(disps, target, (src_fwd, src_bwd), poses,
                              batch[0].k, cfg.depth_range,
                              cfg.lambda_smooth, cfg.ssim_alpha)
    if not np.isfinite(loss.data):
        ids = "?" if batch_ids is None else ",".join(str(i) for i in batch_ids)
        raise NumericError(f"non-finite loss {float(loss.data)!r} on batch [{ids}]")

    models.zero_grad()
    ad.backward(loss)
    if cfg.clip_grad:
        clip_gradients([p for _, p, _ in opt.rows], cfg.clip_grad)
    opt.step()
    return report


def _run_meta(cfg: TrainConfig):
    """Self-describing arrays so eval/infer can rebuild the nets from the
    checkpoint file alone."""
    enc = cfg.encoder
    return {
        "meta.stage_channels": np.array(enc.stage_channels, dtype=float),
        "meta.transformer_layers": np.array(enc.transformer_layers, dtype=float),
        "meta.block_paths": np.array([enc.num_transformer_paths,
                                      float(enc.use_conv_path)]),
        "meta.attention_heads": np.array(float(enc.attention_heads)),
        "meta.input_size": np.array(enc.input_size, dtype=float),
        "meta.depth_range": np.array([cfg.depth_range.d_min,
                                      cfg.depth_range.d_max]),
    }


def config_from_checkpoint(blob):
    """Invert _run_meta; raises CheckpointError on files without metadata."""
    try:
        enc = EncoderConfig(
            stage_channels=tuple(int(c) for c in blob["meta.stage_channels"]),
            transformer_layers=tuple(int(m) for m in
                                     blob["meta.transformer_layers"]),
            num_transformer_paths=int(blob["meta.block_paths"][0]),
            use_conv_path=bool(blob["meta.block_paths"][1]),
            attention_heads=int(blob["meta.attention_heads"]),
            input_size=tuple(int(s) for s in blob["meta.input_size"]),
        )
        drange = DepthRange(*(float(d) for d in blob["meta.depth_range"]))
    except KeyError as missing:
        raise checkpoint.CheckpointError(
            f"checkpoint lacks model metadata ({missing})") from None
    return enc, drange


def load_models(path):
    """Rebuild the three nets from a checkpoint; returns (models, depth range,
    step).  Optimizer state stays on disk — this is the eval/infer entry."""
    blob = checkpoint.load(path)
    enc, drange = config_from_checkpoint(blob)
    cfg = TrainConfig(data_dir="", out_dir="", encoder=enc, depth_range=drange)
    models = build_models(cfg)
    state = {k[len("model."):]: v for k, v in blob.items()
             if k.startswith("model.")}
    for prefix, mod in models.groups():
        sub = {k: v for k, v in state.items() if k.startswith(f"{prefix}.")}
        mod.load_state_dict({k[len(prefix) + 1:]: v for k, v in sub.items()})
    return models, drange, int(blob["step"])


def save_training_state(path, models: Models, opt: AdamW, step: int,
                        cfg: TrainConfig):
    arrays = {"step": np.array(float(step)), **_run_meta(cfg)}
    for name, p in models.named_parameters():
        arrays[f"model.{name}"] = p.data
    for key, val in opt.state_dict().items():
        arrays[f"opt.{key}"] = val
    checkpoint.save(path, arrays)


def load_training_state(path, models: Models, opt: AdamW) -> int:
    blob = checkpoint.load(path)
    state = {k[len("model."):]: v for k, v in blob.items()
             if k.startswith("model.")}
    for prefix, mod in models.groups():
        sub = {k: v for k, v in state.items() if k.startswith(f"{prefix}.")}
        mod.load_state_dict({k[len(prefix) + 1:]: v for k, v in sub.items()})
    opt.load_state_dict({k[len("opt."):]: v for k, v in blob.items()
                         if k.startswith("opt.")})
    return int(blob["step"])


def _log_row(step: int, r: LossReport):
    vals = [r.total, *r.per_scale, r.photometric, r.smoothness, r.automask_ratio]
    return [step] + [f"{v:.10g}" for v in vals]


def fit(cfg: TrainConfig, resume: bool = False):
    """Run the full schedule; returns (models, final checkpoint path).

    Checkpoints land in cfg.out_dir/model.mvck (atomically, so a crash
    mid-write cannot corrupt the previous snapshot), the log in
    cfg.out_dir/train_log.csv with one row per optimizer step.
    """
    triplets, _ = load_dataset(cfg.data_dir)
    h, w = triplets[0].target.shape[1:]
    if cfg.encoder.input_size != (h, w):
        cfg = replace(cfg, encoder=replace(cfg.encoder, input_size=(h, w)))

    models = build_models(cfg)
    opt = AdamW(param_groups(models, cfg))
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt_path = os.path.join(cfg.out_dir, "model.mvck")
    log_path = os.path.join(cfg.out_dir, "train_log.csv")

    start_step = 0
    if resume and os.path.exists(ckpt_path):
        start_step = load_training_state(ckpt_path, models, opt)

    step = 0
    with open(log_path, "a" if start_step else "w", newline="") as f:
        log = csv.writer(f)
        if not start_step:
            log.writerow(LOG_COLUMNS)
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(triplets))
            for lo in range(0, len(order), cfg.batch_size):
                ids = order[lo:lo + cfg.batch_size]
                step += 1
                if step <= start_step:
                    continue  # replayed for deterministic resume
                report = train_step([triplets[i] for i in ids], models, opt,
                                    cfg, batch_ids=ids)
                log.writerow(_log_row(step, report))
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_training_state(ckpt_path, models, opt, step, cfg)
    save_training_state(ckpt_path, models, opt, step, cfg)
    return models, ckpt_path
