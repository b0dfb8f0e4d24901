"""Flat-vector packing of named parameter blocks for the optimizers."""

from __future__ import annotations

import numpy as np

from .core_math import KernelHyper, noise_to_raw, raw_to_noise


class ParamLayout:
    """Fixed ordering of named array blocks inside one flat vector."""

    def __init__(self, shapes):
        self.names = [name for name, _ in shapes]
        self.shapes = {name: tuple(shape) for name, shape in shapes}
        self.slices = {}
        k = 0
        for name in self.names:
            size = int(np.prod(self.shapes[name], dtype=int))
            self.slices[name] = slice(k, k + size)
            k += size
        self.size = k

    @classmethod
    def like(cls, blocks, names=None):
        names = list(blocks) if names is None else names
        return cls([(name, np.shape(blocks[name])) for name in names])

    def pack(self, blocks) -> np.ndarray:
        out = np.empty(self.size)
        for name in self.names:
            out[self.slices[name]] = np.ravel(blocks[name])
        return out

    def unpack(self, vec) -> dict:
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.size:
            raise ValueError(f"expected {self.size} parameters, got {vec.size}")
        return {name: vec[self.slices[name]].reshape(self.shapes[name]) for name in self.names}

    def mask(self, names) -> np.ndarray:
        m = np.zeros(self.size, bool)
        for name in names:
            m[self.slices[name]] = True
        return m


HYPER_KEYS = ("log_scale", "log_lengthscales", "raw_noise", "mean")
# an ARD lengthscale past exp(40) has switched its input off; capping keeps it finite
LOG_LENGTHSCALE_CAP = 40.0


def hyper_blocks(hyper: KernelHyper, mean_const: float) -> dict:
    return {
        "log_scale": np.log(hyper.scale),
        "log_lengthscales": np.log(hyper.lengthscales),
        "raw_noise": noise_to_raw(hyper.noise),
        "mean": float(mean_const),
    }


def blocks_hyper(blocks) -> tuple:
    hyper = KernelHyper(
        float(np.exp(blocks["log_scale"])),
        np.exp(np.minimum(np.asarray(blocks["log_lengthscales"], float), LOG_LENGTHSCALE_CAP)),
        raw_to_noise(float(blocks["raw_noise"])),
    )
    return hyper, float(blocks["mean"])
