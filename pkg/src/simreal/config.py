"""Run configuration: defaults, presets, INI files, and CLI overrides.

Configuration is a two-level mapping (section -> key -> typed value).  The
``desk`` preset is sized for a laptop CPU end-to-end run; ``paper`` restores
the full-scale protocol (512 px images, 3000 images per class, 2000
translation steps, 224 px classifier inputs).  Files use INI ``key = value``
sections; unknown sections or keys are rejected by name.
"""

import configparser
import copy
import hashlib
import json
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


def _taps(text):
    return tuple(int(t) for t in str(text).replace(" ", "").split(",") if t != "")


def _bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


# section -> key -> (parser, desk default)
SCHEMA = {
    "generate": {
        "size": (int, 64),
        "x_train_per_class": (int, 500),
        "x_test_per_class": (int, 100),
        "y_style_per_class": (int, 100),
        "y_eval_per_class": (int, 100),
    },
    "casnet": {
        "steps": (int, 500),
        "batch_size": (int, 2),
        "lr": (float, 1e-3),
        "beta1": (float, 0.5),
        "beta2": (float, 0.999),
        "optimizer": (str, "adam"),
        "image_size": (int, 64),
        "perceptual_size": (int, 32),
        "cadt": (_bool, True),
        "content_taps": (_taps, (3,)),
        "style_taps": (_taps, (0, 1, 2, 3, 4)),
        "log_every": (int, 10),
    },
    "cyclegan": {
        "steps": (int, 200),
        "batch_size": (int, 2),
        "lr": (float, 1e-3),
        "beta1": (float, 0.5),
        "beta2": (float, 0.999),
        "optimizer": (str, "adam"),
        "image_size": (int, 64),
        "gen_updates_per_step": (int, 2),
        "w_cycle": (float, 10.0),
    },
    "classifier": {
        "epochs": (int, 15),
        "batch_size": (int, 32),
        "lr": (float, 5e-3),
        "optimizer": (str, "sgd"),
        "input_size": (int, 64),
        "freeze_backbone": (_bool, True),
        "dropout": (float, 0.5),
    },
    "convert": {
        "batch_size": (int, 8),
    },
    "losses": {
        "w_adv": (float, 1.0),
        "w_recon": (float, 10.0),
        "w_consistency": (float, 1.0),
        "w_content": (float, 1.0),
        "w_style": (float, 1e3),
        # future-work hook; no implementation behind it
        "use_sliced_wasserstein_style": (_bool, False),
    },
    "eval": {
        "threshold": (float, 0.5),
        "pca_k": (int, 2),
        "pca_mode": (str, "pixels"),
        "batch_size": (int, 64),
    },
}

PRESETS = {
    "desk": {},
    "paper": {
        "generate": {
            "size": 512,
            "x_train_per_class": 2700,
            "x_test_per_class": 300,
            "y_style_per_class": 100,
            "y_eval_per_class": 100,
        },
        "casnet": {"steps": 2000, "image_size": 512, "perceptual_size": 224},
        "cyclegan": {"steps": 200, "batch_size": 32, "image_size": 512},
        "classifier": {"input_size": 224},
    },
}


def default_config(preset="desk"):
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
    cfg = {sec: {k: copy.deepcopy(default) for k, (_, default) in keys.items()} for sec, keys in SCHEMA.items()}
    for sec, values in PRESETS[preset].items():
        cfg[sec].update(values)
    return cfg


def _apply_typed(cfg, section, key, raw):
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {section}.{key}; known keys: {sorted(SCHEMA[section])}")
    parser = SCHEMA[section][key][0]
    try:
        cfg[section][key] = parser(raw)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from exc


def load_config(path=None, preset="desk", overrides=()):
    """Build the run config: preset defaults, then file, then key=value overrides."""
    cfg = default_config(preset)
    if path is not None:
        ini = configparser.ConfigParser()
        read = ini.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        unknown = []
        for section in ini.sections():
            if section not in SCHEMA:
                unknown.append(f"[{section}]")
                continue
            for key in ini[section]:
                if key not in SCHEMA[section]:
                    unknown.append(f"{section}.{key}")
        if unknown:
            raise ConfigError(f"unknown config entries: {', '.join(unknown)}")
        for section in ini.sections():
            for key, raw in ini[section].items():
                _apply_typed(cfg, section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        _apply_typed(cfg, section.strip(), key.strip(), raw.strip())
    return cfg


def config_hash(payload):
    """Stable 12-hex-digit digest of any JSON-serializable payload."""
    blob = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


@dataclass
class TrainConfig:
    """Hyperparameters of one training run (steps- or epochs-driven)."""

    lr: float
    batch_size: int
    seed: int
    steps: int = 0
    epochs: int = 0
    optimizer: str = "adam"
    beta1: float = 0.5
    beta2: float = 0.999
    gen_updates_per_step: int = 2
    image_size: int = 64
    perceptual_size: int = 32
    input_size: int = 64
    cadt_enabled: bool = True
    content_taps: tuple = (3,)
    style_taps: tuple = (0, 1, 2, 3, 4)
    w_cycle: float = 10.0
    freeze_backbone: bool = True
    dropout: float = 0.5
    log_every: int = 10

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0 or self.epochs < 0 or (self.steps == 0 and self.epochs == 0):
            raise ValueError("exactly one of steps/epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")


def casnet_train_config(cfg, seed):
    c = cfg["casnet"]
    return TrainConfig(
        lr=c["lr"], batch_size=c["batch_size"], seed=seed, steps=c["steps"],
        optimizer=c["optimizer"], beta1=c["beta1"], beta2=c["beta2"],
        image_size=c["image_size"], perceptual_size=c["perceptual_size"],
        cadt_enabled=c["cadt"], content_taps=c["content_taps"], style_taps=c["style_taps"],
        log_every=c["log_every"],
    )


def cyclegan_train_config(cfg, seed):
    c = cfg["cyclegan"]
    return TrainConfig(
        lr=c["lr"], batch_size=c["batch_size"], seed=seed, steps=c["steps"],
        optimizer=c["optimizer"], beta1=c["beta1"], beta2=c["beta2"],
        image_size=c["image_size"], gen_updates_per_step=c["gen_updates_per_step"],
        w_cycle=c["w_cycle"],
    )


def classifier_train_config(cfg, seed):
    c = cfg["classifier"]
    return TrainConfig(
        lr=c["lr"], batch_size=c["batch_size"], seed=seed, epochs=c["epochs"],
        optimizer=c["optimizer"], input_size=c["input_size"],
        freeze_backbone=c["freeze_backbone"], dropout=c["dropout"],
    )


def loss_weights(cfg):
    from .losses import LossWeights

    c = cfg["losses"]
    return LossWeights(
        w_adv=c["w_adv"], w_recon=c["w_recon"], w_consistency=c["w_consistency"],
        w_content=c["w_content"], w_style=c["w_style"],
    )
