"""Run configuration: a flat ``key = value`` file validated against a schema.

Lines are ``key = value``; ``#`` starts a comment. Command-line ``--set``
overrides win over the file. Tuple values are comma separated
(``vae.hidden = 256,256``).
"""

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _optional_int(text):
    if text is None or str(text).strip().lower() in ("", "none"):
        return None
    return int(text)


@dataclass(frozen=True)
class Key:
    parse: object
    default: object
    help: str
    choices: tuple = None


SCHEMA = {
    "seed": Key(int, 0, "root seed; every component derives its own sub-seed"),
    "dataset": Key(str, "synth", "dataset source", ("synth", "idx")),
    "dataset.images": Key(str, "", "IDX image file (dataset = idx)"),
    "dataset.labels": Key(str, "", "IDX label file (dataset = idx)"),
    "dataset.num_classes": Key(int, 5, "synthetic glyph classes"),
    "dataset.per_class": Key(int, 500, "synthetic images per class"),
    "dataset.side": Key(int, 16, "synthetic image side in pixels"),
    "dataset.noise": Key(float, 0.08, "synthetic pixel noise"),
    "dataset.val_fraction": Key(float, 0.2, "held-out validation fraction"),
    "vae.latent_dim": Key(int, 8, "stage-1 latent size"),
    "vae.latent_dim2": Key(_optional_int, None, "stage-2 latent size (defaults to vae.latent_dim)"),
    "vae.hidden": Key(_ints, (256, 256), "stage-1 hidden widths"),
    "vae.hidden2": Key(_ints, (128, 128), "stage-2 hidden widths"),
    "vae.epochs": Key(int, 50, "stage-1 epochs"),
    "vae.epochs2": Key(int, 50, "stage-2 epochs"),
    "vae.batch_size": Key(int, 64, "VAE mini-batch size"),
    "vae.lr": Key(float, 1e-3, "VAE Adam learning rate"),
    "clf.hidden": Key(_ints, (256, 128), "classifier hidden widths"),
    "clf.dropout": Key(float, 0.5, "dropout rate before the classifier head"),
    "clf.epochs": Key(int, 30, "classifier epochs"),
    "clf.batch_size": Key(int, 64, "classifier mini-batch size"),
    "clf.lr": Key(float, 1e-3, "classifier Adam learning rate"),
    "gen.n": Key(int, 50, "target number of fault-revealing cases"),
    "gen.mode": Key(str, "random", "latent sampling strategy", ("random", "search")),
    "gen.k": Key(float, 0.5, "minimum same-class latent distance between retained cases"),
    "gen.max_attempts": Key(_optional_int, None, "candidate budget (default 1000 * gen.n)"),
    "gen.passes": Key(int, 32, "MC-dropout passes per uncertainty estimate"),
    "gen.w1": Key(float, 1.0, "weight of the uncertainty term"),
    "gen.w2": Key(float, 1.0, "weight of the plausibility term"),
    "gen.normalized_o2": Key(_bool, True, "divide the plausibility sum by the latent size"),
    "gen.harvest": Key(_bool, False, "also check every particle's best position after a search"),
    "gen.batch_size": Key(int, 256, "random-mode decode chunk size"),
    "pso.particles": Key(int, 16, "swarm size"),
    "pso.iterations": Key(int, 10, "swarm iterations per search"),
    "pso.inertia": Key(float, 0.729, "inertia weight"),
    "pso.cognitive": Key(float, 1.494, "pull toward the personal best"),
    "pso.social": Key(float, 1.494, "pull toward the neighbourhood best"),
    "pso.topology": Key(str, "global", "neighbourhood structure", ("global", "ring")),
    "pso.ring_neighbors": Key(int, 1, "neighbours per side for the ring topology"),
    "pso.velocity_clamp": Key(float, 1.0, "per-coordinate speed limit"),
    "pso.init_bound": Key(float, 3.0, "particles start uniformly in [-b, b]"),
    "fid.repeats": Key(int, 10, "bootstrap resamples for FID mean and sd"),
}


class RunConfig:
    """Validated configuration values, indexable by key."""

    def __init__(self, values=None):
        self._values = {key: entry.default for key, entry in SCHEMA.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key, value):
        if key not in SCHEMA:
            raise ConfigurationError(f"unknown config key {key!r}")
        entry = SCHEMA[key]
        try:
            parsed = entry.parse(value)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"bad value for {key}: {value!r} ({exc})") from None
        if entry.choices and parsed not in entry.choices:
            raise ConfigurationError(f"{key} must be one of {entry.choices}, got {parsed!r}")
        self._values[key] = parsed

    def __getitem__(self, key):
        return self._values[key]

    def as_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self._values.items()}

    def subseed(self, component):
        """Stable per-component seed derived from the root seed."""
        seq = np.random.SeedSequence(self["seed"], spawn_key=(zlib.crc32(component.encode()),))
        return int(seq.generate_state(1, dtype=np.uint64)[0])

    def rng(self, component):
        return np.random.default_rng(self.subseed(component))

    @classmethod
    def from_file(cls, path):
        return cls(parse_file(path))


def parse_text(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigurationError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def parse_file(path):
    with open(path) as fh:
        return parse_text(fh.read(), str(path))


def parse_override(text):
    if "=" not in text:
        raise ConfigurationError(f"override must be KEY=VALUE, got {text!r}")
    key, value = (part.strip() for part in text.split("=", 1))
    return key, value


def schema_text():
    """The schema as ``key  default  help`` lines, for ``--help`` and docs."""
    rows = []
    for key, entry in SCHEMA.items():
        default = ",".join(map(str, entry.default)) if isinstance(entry.default, tuple) else entry.default
        choices = f" [{'|'.join(entry.choices)}]" if entry.choices else ""
        rows.append(f"  {key:<22} {str(default):<10} {entry.help}{choices}")
    return "\n".join(rows)
