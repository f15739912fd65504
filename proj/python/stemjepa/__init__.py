"""Python bindings for the Stem-JEPA core library."""

import json
import os

import numpy as np

from . import _core
from ._core import (
    ConfigError,
    CorruptionError,
    InputError,
    IoError,
    NumericalError,
    StemJepaError,
    alignment_similarity,
    ema_schedule,
    jepa_loss,
    lr_schedule,
    patchify,
    write_wav,
)

__all__ = [
    "ConfigError",
    "CorruptionError",
    "InputError",
    "IoError",
    "Model",
    "NumericalError",
    "StemJepaError",
    "alignment_similarity",
    "default_config",
    "ema_schedule",
    "jepa_loss",
    "log_mel",
    "lr_schedule",
    "patchify",
    "read_wav",
    "run",
    "write_wav",
]


def default_config():
    """Default run configuration as a dict."""
    return json.loads(_core.default_config())


def log_mel(samples, sample_rate=16000, **frontend):
    """Log-mel spectrogram [n_mels x frames]; keyword arguments override frontend keys."""
    return _core.log_mel(np.asarray(samples, dtype=np.float32), sample_rate, json.dumps(frontend))


def read_wav(path):
    """Returns (samples, sample_rate) with channels averaged."""
    return _core.read_wav(os.fspath(path))


def run(command, config=None, out=None, checkpoint=None, embeddings=None, overrides=(), force=False,
        resume=False, quiet=True):
    """Runs a command-line subcommand in process and returns its main output path (a pathlib.Path)."""
    opt = lambda p: None if p is None else os.fspath(p)
    return _core.run_command(command, opt(config), opt(out), opt(checkpoint), opt(embeddings), list(overrides),
                             force, resume, quiet)


class Model:
    """Encoder/predictor pair, freshly initialized or loaded from a checkpoint."""

    def __init__(self, native):
        self._native = native

    @classmethod
    def from_config(cls, config=None, seed=0):
        return cls(_core.Model.from_config(json.dumps(config or {}), seed))

    @classmethod
    def load(cls, path):
        return cls(_core.Model.load(os.fspath(path)))

    @property
    def config(self):
        return json.loads(self._native.config)

    @property
    def labels(self):
        return list(self._native.labels)

    @property
    def dim(self):
        return self._native.dim

    @property
    def step(self):
        return self._native.step

    def encode(self, samples, sample_rate=16000, role="context"):
        """List of [tokens x d] arrays, one per window."""
        return self._native.encode(np.asarray(samples, dtype=np.float32), sample_rate, role)

    def predict(self, context, label=None):
        return self._native.predict(np.asarray(context, dtype=np.float32), label)

    def embed(self, samples, sample_rate=16000, pooling="mean"):
        return self._native.embed(np.asarray(samples, dtype=np.float32), sample_rate, pooling)
