"""Semi-paired training loop.

One iteration, in order:

1. draw a paired batch (rare-weighted or uniform, depending on the phase)
2. update D on the paired segmentation loss; fakes detached from G
3. update G on adversarial segmentation + feature matching + perceptual loss
4. draw unpaired images and unpaired labels independently
5. update G on the cycle loss through frozen D plus the unconditional
   adversarial loss
6. update D_u on unpaired reals and freshly regenerated fakes

Ablation switches turn off or replace individual pieces of the method.
"""

from __future__ import annotations

import copy
import enum
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import losses
from .checkpoint import optimizer_from_container, optimizer_to_container, read_container, write_container
from .core import ConfigError, DataError, NumericError, SplitDataset, images_to_tensor, labels_to_tensor
from .networks import Generator, PerceptualExtractor, UncondDiscriminator, UNetDiscriminator, set_trainable
from .sampling import Phase, SamplingPlan, class_pixel_stats, draw_paired_batch, draw_uniform_batch, make_plan
from .synthdata import file_sha256, load_split

logger = logging.getLogger(__name__)

LOSS_KEYS = ("L_D", "L_G_adv", "L_fm", "L_vgg", "L_G_cycle", "L_G_uadv", "L_D_u")
CHECKPOINT_FORMAT = "semipaired-train-state"


class Ablation(str, enum.Enum):
    NONE = "NONE"
    SEPARATE_REVERSE_NET = "SEPARATE_REVERSE_NET"  # cycle through a separately trained segmenter
    UNFROZEN_SHARED_D = "UNFROZEN_SHARED_D"  # D also updated by the cycle loss
    NO_FM = "NO_FM"  # drop feature matching
    NO_VGG = "NO_VGG"  # drop the perceptual loss
    NO_RARE_SAMPLING = "NO_RARE_SAMPLING"  # uniform paired sampling throughout
    RARE_SAMPLING_PHASE2 = "RARE_SAMPLING_PHASE2"  # rare-weighted sampling in the second half
    PAIRED_ONLY = "PAIRED_ONLY"  # supervised-only baseline, unpaired phase skipped


@dataclass
class TrainConfig:
    total_iterations: int = 20000
    batch_size: int = 8
    learning_rate: float = 1e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.999
    noise_dim: int = 64
    w_adv: float = 1.0
    w_fm: float = 1.0
    w_vgg: float = 1.0
    w_cycle: float = 1.0
    w_uadv: float = 1.0
    ablation: Ablation = Ablation.NONE
    seed: int = 0
    checkpoint_interval: int = 1000
    du_on_paired: bool = False
    # architecture and implementation knobs
    extractor_seed: int = 1234
    g_channels: int = 16
    d_channels: int = 8
    d_depth: int = 3
    cycle_fake_class: str = "renormalize"
    ema_decay: float = 0.0

    def __post_init__(self):
        self.ablation = Ablation(self.ablation)
        if self.total_iterations < 1:
            raise ConfigError("total_iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint_interval must be >= 1")
        for name in ("w_adv", "w_fm", "w_vgg", "w_cycle", "w_uadv"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.cycle_fake_class not in ("renormalize", "full"):
            raise ConfigError("cycle_fake_class must be 'renormalize' or 'full'")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablation"] = self.ablation.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _parse_value(raw: str, typ):
    if typ is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return typ(raw)


def parse_config_text(text: str) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` starts a comment)."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    casts = {"int": int, "float": float, "bool": bool, "str": str, "Ablation": Ablation}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _parse_value(raw, casts[types[key]])
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from e
    return TrainConfig.from_dict(values)


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config_text(text)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())


# -- state -------------------------------------------------------------------


@dataclass
class TrainData:
    """Dataset tensors held once for the whole run; labels kept as uint8 one-hot."""

    paired_images: torch.Tensor
    paired_labels: torch.Tensor
    unpaired_images: torch.Tensor
    unpaired_labels: torch.Tensor
    num_classes: int
    image_size: int

    @classmethod
    def from_split(cls, split: SplitDataset) -> "TrainData":
        first = split.paired[0]
        empty_img = torch.zeros(0, 3, first.image.height, first.image.width)
        empty_lbl = torch.zeros(0, first.label.num_classes, first.label.height, first.label.width, dtype=torch.uint8)
        return cls(
            paired_images=images_to_tensor([s.image for s in split.paired]),
            paired_labels=labels_to_tensor([s.label for s in split.paired], torch.uint8),
            unpaired_images=images_to_tensor(split.unpaired_images) if split.unpaired_images else empty_img,
            unpaired_labels=labels_to_tensor(split.unpaired_labels, torch.uint8) if split.unpaired_labels else empty_lbl,
            num_classes=first.label.num_classes,
            image_size=first.image.height,
        )


RNG_STREAMS = ("paired", "unpaired_images", "unpaired_labels", "noise")


@dataclass
class TrainState:
    cfg: TrainConfig
    G: Generator
    D: UNetDiscriminator
    D_u: UncondDiscriminator
    extractor: PerceptualExtractor
    opt_G: torch.optim.Optimizer
    opt_D: torch.optim.Optimizer
    opt_D_u: torch.optim.Optimizer
    rngs: dict[str, np.random.Generator]
    iteration: int = 0
    R: UNetDiscriminator | None = None  # separate reverse network (SEPARATE_REVERSE_NET only)
    opt_R: torch.optim.Optimizer | None = None
    G_ema: Generator | None = None

    def networks(self) -> dict[str, torch.nn.Module]:
        nets = {"G": self.G, "D": self.D, "D_u": self.D_u}
        if self.R is not None:
            nets["R"] = self.R
        if self.G_ema is not None:
            nets["G_ema"] = self.G_ema
        return nets

    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        opts = {"G": self.opt_G, "D": self.opt_D, "D_u": self.opt_D_u}
        if self.opt_R is not None:
            opts["R"] = self.opt_R
        return opts


def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(float(cfg.adam_beta1), float(cfg.adam_beta2)))


def build_networks(cfg: TrainConfig, num_classes: int, image_size: int, seed: int | None = None):
    """Construct G, D, D_u (and R under SEPARATE_REVERSE_NET) with torch init seeded from ``seed``."""
    seed = cfg.seed if seed is None else seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        G = Generator(num_classes, cfg.noise_dim, cfg.g_channels, image_size)
        D = UNetDiscriminator(num_classes, cfg.d_channels, cfg.d_depth, image_size)
        D_u = UncondDiscriminator(cfg.d_channels, image_size)
        R = UNetDiscriminator(num_classes, cfg.d_channels, cfg.d_depth, image_size)
    if cfg.ablation is not Ablation.SEPARATE_REVERSE_NET:
        R = None
    return G, D, D_u, R


def init_state(cfg: TrainConfig, num_classes: int, image_size: int) -> TrainState:
    G, D, D_u, R = build_networks(cfg, num_classes, image_size)
    seqs = np.random.SeedSequence(cfg.seed).spawn(len(RNG_STREAMS))
    G_ema = None
    if cfg.ema_decay > 0:
        G_ema = set_trainable(copy.deepcopy(G), False)
    return TrainState(
        cfg=cfg,
        G=G,
        D=D,
        D_u=D_u,
        extractor=PerceptualExtractor(cfg.extractor_seed),
        opt_G=_adam(G.parameters(), cfg),
        opt_D=_adam(D.parameters(), cfg),
        opt_D_u=_adam(D_u.parameters(), cfg),
        rngs={name: np.random.default_rng(s) for name, s in zip(RNG_STREAMS, seqs)},
        R=R,
        opt_R=_adam(R.parameters(), cfg) if R is not None else None,
        G_ema=G_ema,
    )


def _noise(state: TrainState, n: int) -> torch.Tensor:
    return torch.from_numpy(state.rngs["noise"].standard_normal((n, state.cfg.noise_dim), dtype=np.float32))


Probe = Callable[[str, TrainState], None]


def _nop(stage: str, state: TrainState) -> None:
    pass


def train_step(state: TrainState, data: TrainData, plan: SamplingPlan, probe: Probe = _nop) -> dict:
    """Run one iteration in place and return its loss record.

    ``probe(stage, state)`` is called at stage boundaries; tests use it to
    snapshot parameters and count evaluations.
    """
    cfg = state.cfg
    G, D, D_u = state.G, state.D, state.D_u
    B = cfg.batch_size
    ab = cfg.ablation
    it = state.iteration
    record: dict = {"iteration": it}
    probe("start", state)

    # (1) paired batch
    phase = plan.phase(it)
    idx = torch.from_numpy(draw_paired_batch(plan, phase, B, state.rngs["paired"]))
    x_p = data.paired_images[idx]
    m_p = data.paired_labels[idx].float()
    z_p = _noise(state, B)
    alpha_p = losses.class_balance_weights(m_p)
    record["phase"] = phase.value

    # (2) conditional discriminator
    with torch.no_grad():
        fake_p = G(m_p, z_p)
    logits = D(torch.cat([x_p, fake_p])).logits
    L_D = losses.discriminator_loss_paired(logits[:B], logits[B:], m_p, alpha_p)
    state.opt_D.zero_grad(set_to_none=True)
    L_D.backward()
    state.opt_D.step()
    probe("after_D_step", state)

    # (3) supervised generator step
    set_trainable(D, False)
    set_trainable(D_u, False)
    fake_p = G(m_p, z_p)
    fake_out = D(fake_p)
    with torch.no_grad():
        real_out = D(x_p)
    L_adv = losses.generator_adversarial_seg_loss(fake_out.logits, m_p, alpha_p)
    L_fm = losses.feature_matching_loss(real_out.features, fake_out.features)
    L_vgg = losses.perceptual_loss(x_p, fake_p, state.extractor)
    loss_sup = cfg.w_adv * L_adv
    if ab is not Ablation.NO_FM:
        loss_sup = loss_sup + cfg.w_fm * L_fm
    if ab is not Ablation.NO_VGG:
        loss_sup = loss_sup + cfg.w_vgg * L_vgg
    if cfg.du_on_paired and ab is not Ablation.PAIRED_ONLY:
        probe("D_u_on_paired", state)
        loss_sup = loss_sup + cfg.w_uadv * losses.generator_unconditional_adv_loss(D_u(fake_p))
    state.opt_G.zero_grad(set_to_none=True)
    loss_sup.backward()
    state.opt_G.step()
    record.update(L_D=L_D.item(), L_G_adv=L_adv.item(), L_fm=L_fm.item(), L_vgg=L_vgg.item())
    probe("after_G_sup_step", state)

    if ab is Ablation.PAIRED_ONLY:
        set_trainable(D, True)
        set_trainable(D_u, True)
        record.update(L_G_cycle=None, L_G_uadv=None, L_D_u=None)
        return _finish(state, record)

    # (4) unpaired batches, drawn independently
    n_up = data.unpaired_images.shape[0]
    if n_up == 0:
        raise DataError("the unpaired pools are empty; use ablation PAIRED_ONLY for r = 1")
    x_up = data.unpaired_images[torch.from_numpy(draw_uniform_batch(n_up, B, state.rngs["unpaired_images"]))]
    m_up = data.unpaired_labels[torch.from_numpy(draw_uniform_batch(n_up, B, state.rngs["unpaired_labels"]))].float()
    z_up = _noise(state, B)
    alpha_up = losses.class_balance_weights(m_up)

    # (5) cycle + unconditional adversarial generator step
    reverse = state.R if ab is Ablation.SEPARATE_REVERSE_NET else D
    if ab is Ablation.SEPARATE_REVERSE_NET:
        set_trainable(state.R, False)
    if ab is Ablation.UNFROZEN_SHARED_D:
        set_trainable(D, True)
        state.opt_D.zero_grad(set_to_none=True)
    probe("before_G_unpaired_step", state)
    fake_up = G(m_up, z_up)
    L_cyc = losses.generator_unpaired_cycle_loss(reverse(fake_up).logits, m_up, alpha_up, cfg.cycle_fake_class)
    L_uadv = losses.generator_unconditional_adv_loss(D_u(fake_up))
    state.opt_G.zero_grad(set_to_none=True)
    (cfg.w_cycle * L_cyc + cfg.w_uadv * L_uadv).backward()
    state.opt_G.step()
    if ab is Ablation.UNFROZEN_SHARED_D:
        state.opt_D.step()
    set_trainable(D, True)
    probe("after_G_unpaired_step", state)

    if ab is Ablation.SEPARATE_REVERSE_NET:
        set_trainable(state.R, True)
        seg = state.R(fake_up.detach()).logits
        L_R = losses.generator_unpaired_cycle_loss(seg, m_up, alpha_up, cfg.cycle_fake_class)
        state.opt_R.zero_grad(set_to_none=True)
        L_R.backward()
        state.opt_R.step()
        record["L_R"] = L_R.item()

    # (6) unconditional discriminator on regenerated fakes
    set_trainable(D_u, True)
    with torch.no_grad():
        fake_up = G(m_up, z_up)
    reals, fakes = x_up, fake_up
    if cfg.du_on_paired:
        probe("D_u_on_paired", state)
        with torch.no_grad():
            fake_p = G(m_p, z_p)
        reals, fakes = torch.cat([x_up, x_p]), torch.cat([fake_up, fake_p])
    scores = D_u(torch.cat([reals, fakes]))
    L_Du = losses.unconditional_discriminator_loss(scores[: len(reals)], scores[len(reals) :])
    state.opt_D_u.zero_grad(set_to_none=True)
    L_Du.backward()
    state.opt_D_u.step()
    probe("after_D_u_step", state)

    record.update(L_G_cycle=L_cyc.item(), L_G_uadv=L_uadv.item(), L_D_u=L_Du.item())
    return _finish(state, record)


def _finish(state: TrainState, record: dict) -> dict:
    if state.G_ema is not None:
        d = state.cfg.ema_decay
        with torch.no_grad():
            for pe, p in zip(state.G_ema.parameters(), state.G.parameters()):
                pe.mul_(d).add_(p, alpha=1 - d)
    state.iteration += 1
    bad = [k for k in LOSS_KEYS if record.get(k) is not None and not math.isfinite(record[k])]
    if bad:
        raise NumericError(f"non-finite loss {bad} at iteration {record['iteration']}", record)
    return record


# -- checkpoints -------------------------------------------------------------


def save_state(state: TrainState, path, extra_meta: dict | None = None) -> None:
    tensors, opt_meta = {}, {}
    for name, net in state.networks().items():
        for k, v in net.state_dict().items():
            tensors[f"net/{name}/{k}"] = v
    for name, opt in state.optimizers().items():
        t, m = optimizer_to_container(opt, f"opt/{name}")
        tensors.update(t)
        opt_meta[name] = m
    meta = {
        "format": CHECKPOINT_FORMAT,
        "iteration": state.iteration,
        "config": state.cfg.to_dict(),
        "architectures": {name: net.architecture_id for name, net in state.networks().items()},
        "extractor_id": state.extractor.extractor_id,
        "num_classes": state.G.num_classes,
        "image_size": state.G.image_size,
        "optimizers": opt_meta,
        "rng": {name: g.bit_generator.state for name, g in state.rngs.items()},
        "extra": extra_meta or {},
    }
    write_container(path, tensors, meta)


def load_state(path) -> tuple[TrainState, dict]:
    tensors, meta = read_container(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a training checkpoint")
    try:
        cfg = TrainConfig.from_dict(meta["config"])
        state = init_state(cfg, int(meta["num_classes"]), int(meta["image_size"]))
        for name, net in state.networks().items():
            if meta["architectures"].get(name) != net.architecture_id:
                raise DataError(f"{path}: architecture mismatch for {name}")
            prefix = f"net/{name}/"
            sd = {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}
            net.load_state_dict(sd, strict=True)
        for name, opt in state.optimizers().items():
            optimizer_from_container(opt, f"opt/{name}", tensors, meta["optimizers"][name])
        for name, g in state.rngs.items():
            g.bit_generator.state = meta["rng"][name]
        state.iteration = int(meta["iteration"])
    except DataError:
        raise
    except (KeyError, RuntimeError, ValueError, ConfigError) as e:
        raise DataError(f"corrupt training checkpoint {path}: {e}") from e
    return state, meta


def load_generator(path, use_ema: bool = True) -> tuple[Generator, dict]:
    """Load only the generator (the EMA copy when present and ``use_ema``)."""
    tensors, meta = read_container(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a training checkpoint")
    try:
        cfg = TrainConfig.from_dict(meta["config"])
        G = Generator(int(meta["num_classes"]), cfg.noise_dim, cfg.g_channels, int(meta["image_size"]))
        name = "G_ema" if use_ema and "G_ema" in meta["architectures"] else "G"
        prefix = f"net/{name}/"
        G.load_state_dict({k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)})
    except (KeyError, RuntimeError, ValueError, ConfigError) as e:
        raise DataError(f"corrupt training checkpoint {path}: {e}") from e
    set_trainable(G, False)
    return G.eval(), meta


# -- driver ------------------------------------------------------------------


def _format_record(record: dict) -> str:
    return json.dumps(record, separators=(", ", ": "))


def _truncate_log(log_path: Path, keep_below: int) -> None:
    if not log_path.exists():
        return
    kept = []
    for line in log_path.read_text().splitlines():
        if line.strip() and json.loads(line)["iteration"] < keep_below:
            kept.append(line + "\n")
    log_path.write_text("".join(kept))


def run_training(
    cfg: TrainConfig | None,
    data_dir,
    out_dir,
    resume=None,
    probe: Probe = _nop,
    num_threads: int | None = 1,
) -> Path:
    """Train on the split in ``data_dir``; returns the path of the final checkpoint.

    Determinism holds with a single torch thread (the default).
    """
    if num_threads is not None:
        torch.set_num_threads(num_threads)
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    split, spec, split_manifest = load_split(data_dir)
    data_hash = file_sha256(Path(data_dir) / "split.json")
    dataset_hash = split_manifest["dataset_manifest_sha256"]

    if resume is not None:
        state, meta = load_state(resume)
        if cfg is not None and cfg.to_dict() != state.cfg.to_dict():
            raise ConfigError("config differs from the one stored in the resume checkpoint")
        if meta["extra"].get("split_sha256") not in (None, data_hash):
            raise DataError("resume checkpoint was trained on a different split")
        cfg = state.cfg
    else:
        if cfg is None:
            raise ConfigError("a config is required unless resuming")
        state = init_state(cfg, spec.num_classes, spec.image_size)

    (out / "config.resolved.txt").write_text(format_config(cfg))
    data = TrainData.from_split(split)
    stats = class_pixel_stats(split.paired)
    plan = make_plan(
        stats,
        cfg.total_iterations,
        rare_phase_first=cfg.ablation is not Ablation.RARE_SAMPLING_PHASE2,
        rare_sampling=cfg.ablation is not Ablation.NO_RARE_SAMPLING,
    )
    extra = {
        "split_sha256": data_hash,
        "dataset_manifest_sha256": dataset_hash,
        "dataset_dir": split_manifest["dataset_dir_resolved"],
        "scene_spec": spec.to_dict(),
    }

    log_path = out / "losses.jsonl"
    if resume is None:
        log_path.write_text("")
    else:
        _truncate_log(log_path, state.iteration)
    logger.info("training from iteration %d to %d", state.iteration, cfg.total_iterations)
    with open(log_path, "a") as log:
        while state.iteration < cfg.total_iterations:
            try:
                record = train_step(state, data, plan, probe)
            except NumericError as e:
                if e.record is not None:
                    log.write(_format_record({**e.record, "error": str(e)}) + "\n")
                raise
            log.write(_format_record(record) + "\n")
            if state.iteration % cfg.checkpoint_interval == 0:
                log.flush()
                save_state(state, out / "checkpoints" / f"ckpt_{state.iteration:07d}.ckpt", extra)
                logger.info("iteration %d: %s", state.iteration, {k: record[k] for k in LOSS_KEYS})
    final = out / "checkpoints" / "final.ckpt"
    save_state(state, final, extra)
    return final
