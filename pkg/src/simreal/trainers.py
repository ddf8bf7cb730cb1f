"""Training loops, checkpointing, and dataset conversion.

Three trainers: the baseline cycle-consistent GAN, the content/style
disentangling translation system, and the binary deformation classifier.
Every trainer is deterministic given its seed; checkpoints carry optimizer
moments and all RNG states so a resumed run continues bit-identically.
"""

import csv
import os
import time
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .cadt import transfer_styles
from .config import TrainConfig
from .data import ArrayDataset, BatchSampler, EpochSampler, resize_batch
from .losses import (
    LossWeights,
    TrainingDivergenceError,
    adversarial_loss_casnet,
    adversarial_loss_cyclegan,
    perceptual_content_loss,
    perceptual_style_loss,
    reconstruction_loss,
    total_casnet_loss,
)
from .networks import build_network
from .synthgen import DOMAIN_CONVERTED, DatasetManifest, ManifestEntry, encode_png

CHECKPOINT_FORMAT_VERSION = 1
_MASK = 2**63 - 1


def derive_seed(base, tag):
    """Stable per-component sub-seed from a run seed and a short tag."""
    ss = np.random.SeedSequence([base & _MASK, zlib.crc32(tag.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint64)[0] & _MASK)


@dataclass
class CheckpointState:
    """A loaded checkpoint: rebuilt networks plus everything needed to resume."""

    step: int
    config_hash: str
    nets: dict
    optimizer_states: dict
    rng: dict
    extra: dict = field(default_factory=dict)
    path: str = ""


def _net_spec(net, frozen=False):
    spec = {
        "arch": net.arch,
        "init_seed": net.init_seed,
        "kwargs": net.build_kwargs,
        "frozen": frozen,
    }
    if not frozen:  # frozen nets are rebuilt bit-identically from their seed
        spec["state"] = {k: v.clone() for k, v in net.state_dict().items()}
    return spec


def checkpoint_payload(nets, optimizers, step, config_hash, samplers=None, extra=None, frozen=()):
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": step,
        "config_hash": config_hash,
        "nets": {name: _net_spec(net, frozen=name in frozen) for name, net in nets.items()},
        "optimizers": {name: opt.state_dict() for name, opt in (optimizers or {}).items()},
        "rng": {
            "torch": torch.get_rng_state(),
            "samplers": {name: s.get_state() for name, s in (samplers or {}).items()},
        },
        "extra": extra or {},
    }


def save_checkpoint(path, payload):
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format: {payload.get('format_version')}")
    nets = {}
    for name, spec in payload["nets"].items():
        net = build_network(spec["arch"], spec["init_seed"], **spec["kwargs"])
        if not spec["frozen"]:
            net.load_state_dict(spec["state"])
        nets[name] = net
    return CheckpointState(
        step=payload["step"],
        config_hash=payload["config_hash"],
        nets=nets,
        optimizer_states=payload["optimizers"],
        rng=payload["rng"],
        extra=payload.get("extra", {}),
        path=str(path),
    )


class TrainLog:
    """Long-format CSV loss log: one (step, term, value) row per term."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(["step", "term", "value"])

    def write(self, step, terms):
        for name, value in terms.items():
            self._writer.writerow([step, name, f"{value:.8g}"])

    def close(self):
        self._fh.close()


def _make_optimizer(params, cfg):
    params = [p for p in params if p.requires_grad]
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=1e-8)
    return torch.optim.SGD(params, lr=cfg.lr)


def _check_finite(terms, step):
    for name, value in terms.items():
        if not np.isfinite(value):
            raise TrainingDivergenceError(f"step {step}: loss term {name!r} is non-finite ({value})")


def _abort_with_last_good(out_dir, last_good, exc):
    if out_dir is not None and last_good is not None:
        path = os.path.join(out_dir, "checkpoint_last_good.pt")
        save_checkpoint(path, last_good)
        raise TrainingDivergenceError(f"{exc}; last good checkpoint saved to {path}") from exc
    raise exc


def train_casnet(manifest_x, manifest_y, cfg: TrainConfig, weights=None, out_dir=None,
                 config_hash="", resume_from=None):
    """Train the disentangling translation system; returns the final checkpoint path or payload.

    Per step: encode both batches, separate content/style, transfer styles
    (content-adaptively when enabled), decode converted and reconstructed
    images, then update encoder/separator/generator jointly and the two
    discriminators afterwards.  The perceptual network stays frozen.
    """
    if not manifest_x.entries or not manifest_y.entries:
        raise ValueError("both source and target manifests must be non-empty")
    weights = weights or LossWeights()

    data_x = ArrayDataset.from_manifest(manifest_x)
    data_y = ArrayDataset.from_manifest(manifest_y)
    images_x = resize_batch(data_x.images, cfg.image_size)
    images_y = resize_batch(data_y.images, cfg.image_size)

    nets = {
        "encoder": build_network("encoder", derive_seed(cfg.seed, "encoder")),
        "separator": build_network("separator", derive_seed(cfg.seed, "separator")),
        "generator": build_network("generator", derive_seed(cfg.seed, "generator")),
        "disc_x": build_network("patch_discriminator", derive_seed(cfg.seed, "disc_x")),
        "disc_y": build_network("patch_discriminator", derive_seed(cfg.seed, "disc_y")),
        "perceptual": build_network("perceptual", derive_seed(cfg.seed, "perceptual")),
    }
    enc, sep, gen = nets["encoder"], nets["separator"], nets["generator"]
    d_x, d_y, perc = nets["disc_x"], nets["disc_y"], nets["perceptual"]
    perc.eval()

    opt_g = _make_optimizer(
        list(enc.parameters()) + list(sep.parameters()) + list(gen.parameters()), cfg
    )
    opt_d = _make_optimizer(list(d_x.parameters()) + list(d_y.parameters()), cfg)
    optimizers = {"gen_side": opt_g, "disc_side": opt_d}

    sampler_x = BatchSampler(len(data_x), cfg.batch_size, derive_seed(cfg.seed, "sample_x"))
    sampler_y = BatchSampler(len(data_y), cfg.batch_size, derive_seed(cfg.seed, "sample_y"))
    samplers = {"x": sampler_x, "y": sampler_y}

    torch.manual_seed(derive_seed(cfg.seed, "train"))
    start_step = 0
    if resume_from is not None:
        state = resume_from if isinstance(resume_from, CheckpointState) else load_checkpoint(resume_from)
        for name in nets:
            if name != "perceptual":
                nets[name].load_state_dict(state.nets[name].state_dict())
        opt_g.load_state_dict(state.optimizer_states["gen_side"])
        opt_d.load_state_dict(state.optimizer_states["disc_side"])
        torch.set_rng_state(state.rng["torch"])
        sampler_x.set_state(state.rng["samplers"]["x"])
        sampler_y.set_state(state.rng["samplers"]["y"])
        start_step = state.step

    log = TrainLog(os.path.join(out_dir, "train_log.csv")) if out_dir else None
    extra = {"kind": "casnet", "cadt_enabled": cfg.cadt_enabled, "image_size": cfg.image_size,
             "perceptual_size": cfg.perceptual_size, "content_taps": list(cfg.content_taps),
             "style_taps": list(cfg.style_taps)}
    last_good = None
    t0 = time.time()

    for net in (enc, sep, gen, d_x, d_y):
        net.train()

    try:
        for step in range(start_step, cfg.steps):
            x = images_x[torch.from_numpy(sampler_x.next_batch())]
            y = images_y[torch.from_numpy(sampler_y.next_batch())]

            # generator-side update
            bundle_x = sep(enc(x))
            bundle_y = sep(enc(y))
            spatial = bundle_x.spatial
            mixed_xy, mixed_yx = transfer_styles(bundle_x, bundle_y, cfg.cadt_enabled)
            fake_y = gen.decode(mixed_xy.reshape(-1, *spatial))
            fake_x = gen.decode(mixed_yx.reshape(-1, *spatial))
            rec_x = gen.decode(bundle_x.features)
            rec_y = gen.decode(bundle_y.features)

            adv = adversarial_loss_casnet(None, d_y(fake_y), "generator") + adversarial_loss_casnet(
                None, d_x(fake_x), "generator"
            )
            recon = reconstruction_loss(x, rec_x) + reconstruction_loss(y, rec_y)
            re_x = sep(enc(fake_y))
            re_y = sep(enc(fake_x))
            consistency = F.mse_loss(re_x.content, bundle_x.content) + F.mse_loss(
                re_y.content, bundle_y.content
            )

            ps = cfg.perceptual_size
            with torch.no_grad():
                pf_x = perc(resize_batch(x, ps))
                pf_y = perc(resize_batch(y, ps))
            pf_fake_y = perc(resize_batch(fake_y, ps))
            pf_fake_x = perc(resize_batch(fake_x, ps))
            pf_rec_x = perc(resize_batch(rec_x, ps))
            pf_rec_y = perc(resize_batch(rec_y, ps))

            content = (
                perceptual_content_loss(pf_fake_y, pf_x, cfg.content_taps)
                + perceptual_content_loss(pf_fake_x, pf_y, cfg.content_taps)
                + perceptual_content_loss(pf_rec_x, pf_x, cfg.content_taps)
                + perceptual_content_loss(pf_rec_y, pf_y, cfg.content_taps)
            )
            style = perceptual_style_loss(pf_fake_y, pf_y, cfg.style_taps) + perceptual_style_loss(
                pf_fake_x, pf_x, cfg.style_taps
            )

            total, breakdown = total_casnet_loss(
                {"adv": adv, "recon": recon, "consistency": consistency, "content": content, "style": style},
                weights,
            )
            opt_g.zero_grad()
            total.backward()
            opt_g.step()

            # discriminator update
            d_loss = adversarial_loss_casnet(d_x(x), d_x(fake_x.detach()), "discriminator") + (
                adversarial_loss_casnet(d_y(y), d_y(fake_y.detach()), "discriminator")
            )
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            breakdown["disc"] = float(d_loss)
            breakdown["total"] = float(total)
            _check_finite(breakdown, step)

            if log and (step % cfg.log_every == 0 or step == cfg.steps - 1):
                breakdown["wall_time"] = time.time() - t0
                log.write(step + 1, breakdown)

            last_good = checkpoint_payload(
                nets, optimizers, step + 1, config_hash, samplers, extra, frozen=("perceptual",)
            )
    except TrainingDivergenceError as exc:
        if log:
            log.close()
        _abort_with_last_good(out_dir, last_good, exc)
    if log:
        log.close()

    payload = checkpoint_payload(nets, optimizers, cfg.steps, config_hash, samplers, extra,
                                 frozen=("perceptual",))
    if out_dir is not None:
        return save_checkpoint(os.path.join(out_dir, "checkpoint.pt"), payload)
    return payload


def train_cyclegan(manifest_x, manifest_y, cfg: TrainConfig, out_dir=None, config_hash=""):
    """Train the baseline cycle-consistent pair; generator gets cfg.gen_updates_per_step
    optimizer steps (on the same batch) per discriminator step."""
    if not manifest_x.entries or not manifest_y.entries:
        raise ValueError("both source and target manifests must be non-empty")

    data_x = ArrayDataset.from_manifest(manifest_x)
    data_y = ArrayDataset.from_manifest(manifest_y)
    images_x = resize_batch(data_x.images, cfg.image_size)
    images_y = resize_batch(data_y.images, cfg.image_size)

    nets = {
        "gen_xy": build_network("cycle_generator", derive_seed(cfg.seed, "gen_xy")),
        "gen_yx": build_network("cycle_generator", derive_seed(cfg.seed, "gen_yx")),
        "disc_x": build_network("cycle_discriminator", derive_seed(cfg.seed, "cdisc_x"), image_size=cfg.image_size),
        "disc_y": build_network("cycle_discriminator", derive_seed(cfg.seed, "cdisc_y"), image_size=cfg.image_size),
    }
    g_xy, g_yx, d_x, d_y = nets["gen_xy"], nets["gen_yx"], nets["disc_x"], nets["disc_y"]
    for net in nets.values():
        net.train()

    opt_g = _make_optimizer(list(g_xy.parameters()) + list(g_yx.parameters()), cfg)
    opt_d = _make_optimizer(list(d_x.parameters()) + list(d_y.parameters()), cfg)
    optimizers = {"gen_side": opt_g, "disc_side": opt_d}

    sampler_x = BatchSampler(len(data_x), cfg.batch_size, derive_seed(cfg.seed, "sample_x"))
    sampler_y = BatchSampler(len(data_y), cfg.batch_size, derive_seed(cfg.seed, "sample_y"))
    samplers = {"x": sampler_x, "y": sampler_y}

    torch.manual_seed(derive_seed(cfg.seed, "train"))
    log = TrainLog(os.path.join(out_dir, "train_log.csv")) if out_dir else None
    extra = {"kind": "cyclegan", "image_size": cfg.image_size}
    last_good = None
    t0 = time.time()

    try:
        for step in range(cfg.steps):
            x = images_x[torch.from_numpy(sampler_x.next_batch())]
            y = images_y[torch.from_numpy(sampler_y.next_batch())]

            breakdown = {}
            for _ in range(cfg.gen_updates_per_step):
                fake_y = g_xy(x)
                fake_x = g_yx(y)
                adv = adversarial_loss_cyclegan(d_y(fake_y), True) + adversarial_loss_cyclegan(
                    d_x(fake_x), True
                )
                cycle = reconstruction_loss(g_yx(fake_y), x) + reconstruction_loss(g_xy(fake_x), y)
                g_loss = adv + cfg.w_cycle * cycle
                opt_g.zero_grad()
                g_loss.backward()
                opt_g.step()
            breakdown["adv"] = float(adv)
            breakdown["cycle"] = float(cycle)
            breakdown["gen_total"] = float(g_loss)

            d_loss = (
                adversarial_loss_cyclegan(d_x(x), True)
                + adversarial_loss_cyclegan(d_x(fake_x.detach()), False)
                + adversarial_loss_cyclegan(d_y(y), True)
                + adversarial_loss_cyclegan(d_y(fake_y.detach()), False)
            )
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            breakdown["disc"] = float(d_loss)
            _check_finite(breakdown, step)

            if log and (step % cfg.log_every == 0 or step == cfg.steps - 1):
                breakdown["wall_time"] = time.time() - t0
                log.write(step + 1, breakdown)
            last_good = checkpoint_payload(nets, optimizers, step + 1, config_hash, samplers, extra)
    except TrainingDivergenceError as exc:
        if log:
            log.close()
        _abort_with_last_good(out_dir, last_good, exc)
    if log:
        log.close()

    payload = checkpoint_payload(nets, optimizers, cfg.steps, config_hash, samplers, extra)
    if out_dir is not None:
        return save_checkpoint(os.path.join(out_dir, "checkpoint.pt"), payload)
    return payload


def convert_dataset(ckpt, manifest_x, manifest_y, out_dir, batch_size=8, seed=0):
    """Translate every source image into the target style and write a new dataset.

    Style features come from target batches drawn with a fixed seed; labels
    carry over from the source entries.  Deterministic given (ckpt, seed).
    """
    state = ckpt if isinstance(ckpt, CheckpointState) else load_checkpoint(ckpt)
    if state.extra.get("kind") == "cyclegan":
        return _convert_dataset_cyclegan(state, manifest_x, out_dir, batch_size)
    if not manifest_y.entries:
        raise ValueError("target manifest is empty; style source required")
    enc, sep, gen = state.nets["encoder"], state.nets["separator"], state.nets["generator"]
    for net in (enc, sep, gen):
        net.eval()
    cadt_enabled = bool(state.extra.get("cadt_enabled", True))
    image_size = int(state.extra.get("image_size", manifest_x.image_size))

    data_x = ArrayDataset.from_manifest(manifest_x)
    data_y = ArrayDataset.from_manifest(manifest_y)
    images_x = resize_batch(data_x.images, image_size)
    images_y = resize_batch(data_y.images, image_size)

    rng = np.random.default_rng(np.random.SeedSequence([seed & _MASK, 0xC047]))
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)
    out = DatasetManifest(generator_seed=seed, image_size=image_size, root=os.path.abspath(out_dir))

    with torch.no_grad():
        for start in range(0, len(data_x), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data_x)))
            style_idx = rng.integers(0, len(data_y), size=len(idx))
            x = images_x[torch.from_numpy(idx)]
            y = images_y[torch.from_numpy(style_idx)]
            bundle_x = sep(enc(x))
            bundle_y = sep(enc(y))
            mixed_xy, _ = transfer_styles(bundle_x, bundle_y, cadt_enabled)
            fake_y = gen.decode(mixed_xy.reshape(-1, *bundle_x.spatial))
            _write_converted(out, manifest_x, idx, fake_y, out_dir)
    out.save(os.path.join(out_dir, "manifest.json"))
    return out


def _convert_dataset_cyclegan(state, manifest_x, out_dir, batch_size):
    g_xy = state.nets["gen_xy"]
    g_xy.eval()
    image_size = int(state.extra.get("image_size", manifest_x.image_size))
    data_x = ArrayDataset.from_manifest(manifest_x)
    images_x = resize_batch(data_x.images, image_size)
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)
    out = DatasetManifest(generator_seed=0, image_size=image_size, root=os.path.abspath(out_dir))
    with torch.no_grad():
        for start in range(0, len(data_x), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data_x)))
            fake_y = g_xy(images_x[torch.from_numpy(idx)])
            _write_converted(out, manifest_x, idx, fake_y, out_dir)
    out.save(os.path.join(out_dir, "manifest.json"))
    return out


def _write_converted(out_manifest, manifest_x, idx, fake_y, out_dir):
    pixels = fake_y.clamp(-1.0, 1.0).cpu().numpy().transpose(0, 2, 3, 1)
    for row, i in enumerate(idx):
        src = manifest_x.entries[int(i)]
        new_id = f"conv-{src.id}"
        rel = os.path.join("images", f"{new_id}.png")
        encode_png(pixels[row]).save(os.path.join(out_dir, rel))
        out_manifest.entries.append(
            ManifestEntry(id=new_id, file=rel, label=src.label, domain=DOMAIN_CONVERTED,
                          params=src.params, pose=src.pose)
        )


def train_classifier(manifest, cfg: TrainConfig, out_dir=None, config_hash=""):
    """Train the binary deformation classifier with binary cross-entropy.

    With ``cfg.freeze_backbone`` every conv except the final one is frozen;
    the frozen prefix is evaluated once per image and cached, then only the
    final conv block and the fully connected head train on the cache.
    """
    data = ArrayDataset.from_manifest(manifest)
    pos, neg = data.class_presence()
    if pos == 0 or neg == 0:
        raise ValueError(f"manifest must contain both classes (deformed={pos}, nondeformed={neg})")
    images = resize_batch(data.images, cfg.input_size)
    labels = data.labels

    clf = build_network("classifier", derive_seed(cfg.seed, "classifier"), dropout=cfg.dropout)
    if cfg.freeze_backbone:
        clf.freeze_backbone()
    opt = _make_optimizer(clf.parameters(), cfg)
    sampler = EpochSampler(len(data), cfg.batch_size, derive_seed(cfg.seed, "epochs"))
    torch.manual_seed(derive_seed(cfg.seed, "train"))

    cached = None
    if cfg.freeze_backbone:
        with torch.no_grad():
            chunks = [clf.frozen_prefix(images[i : i + 64]) for i in range(0, len(data), 64)]
        cached = torch.cat(chunks)

    log = TrainLog(os.path.join(out_dir, "train_log.csv")) if out_dir else None
    clf.train()
    t0 = time.time()
    step = 0
    for epoch in range(cfg.epochs):
        epoch_loss, n_batches = 0.0, 0
        for idx in sampler.epoch():
            sel = torch.from_numpy(idx)
            if cached is not None:
                feats = clf.trainable_tail(cached[sel])
                probs = clf.head(feats)
            else:
                probs = clf(images[sel])
            loss = F.binary_cross_entropy(torch.clamp(probs, 1e-7, 1 - 1e-7), labels[sel])
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss)
            n_batches += 1
            step += 1
        if not np.isfinite(epoch_loss):
            raise TrainingDivergenceError(f"epoch {epoch}: classifier loss non-finite")
        if log:
            log.write(epoch + 1, {"bce": epoch_loss / max(n_batches, 1), "wall_time": time.time() - t0})
    if log:
        log.close()

    extra = {"kind": "classifier", "input_size": cfg.input_size,
             "freeze_backbone": cfg.freeze_backbone, "train_ids": sorted(data.ids)}
    payload = checkpoint_payload({"classifier": clf}, {"classifier": opt}, step, config_hash,
                                 {"epochs": sampler}, extra)
    if out_dir is not None:
        return save_checkpoint(os.path.join(out_dir, "checkpoint.pt"), payload)
    return payload
