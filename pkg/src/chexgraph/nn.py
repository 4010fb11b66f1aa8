"""Minimal layer/module abstractions over the autodiff engine.

A ``Module`` owns named parameters (trainable tensors, each tagged with a
weight-decay flag) and named buffers (plain arrays such as batch-norm
running statistics).  Names are hierarchical dotted paths, which is also the
key space of the checkpoint format.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    def __init__(self):
        self._params: dict[str, tuple[Tensor, bool]] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._modules: dict[str, Module] = {}
        self.training = True

    def register_parameter(self, name: str, tensor: Tensor, decay: bool = False):
        self._params[name] = (tensor, decay)
        return tensor

    def register_buffer(self, name: str, array: np.ndarray):
        self._buffers[name] = array
        return array

    def register_module(self, name: str, module: "Module"):
        self._modules[name] = module
        return module

    def named_parameters(self, prefix: str = ""):
        """Yields (name, tensor, decay_flag) in registration order."""
        for name, (t, decay) in self._params.items():
            yield (prefix + name, t, decay)
        for mname, mod in self._modules.items():
            yield from mod.named_parameters(prefix + mname + ".")

    def named_buffers(self, prefix: str = ""):
        for name, arr in self._buffers.items():
            yield (prefix + name, arr)
        for mname, mod in self._modules.items():
            yield from mod.named_buffers(prefix + mname + ".")

    def parameters(self):
        return [t for _, t, _ in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True):
        self.training = mode
        for mod in self._modules.values():
            mod.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All parameters and buffers as a flat name -> array mapping."""
        out = {name: t.data for name, t, _ in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for name, t, _ in self.named_parameters():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            if arrays[name].shape != t.data.shape:
                raise ValueError(f"parameter {name!r}: checkpoint shape "
                                 f"{arrays[name].shape} != model shape {t.data.shape}")
            t.data = arrays[name].astype(t.data.dtype, copy=True)
        for name, buf in self.named_buffers():
            if name not in arrays:
                raise KeyError(f"checkpoint missing buffer {name!r}")
            if arrays[name].shape != buf.shape:
                raise ValueError(f"buffer {name!r}: checkpoint shape "
                                 f"{arrays[name].shape} != model shape {buf.shape}")
            buf[...] = arrays[name]


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1,
                 padding: int = 0, bias: bool = True, *, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = cin * kernel * kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, kernel, kernel))
        self.w = self.register_parameter("w", ad.parameter(w, dtype=dtype), decay=True)
        self.b = None
        if bias:
            self.b = self.register_parameter(
                "b", ad.parameter(np.zeros(cout), dtype=dtype), decay=False)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class Linear(Module):
    """Fully connected layer; excluded from weight decay (graph aggregators)."""

    def __init__(self, fin: int, fout: int, *, init: str = "zeros",
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        if init == "zeros":
            w = np.zeros((fin, fout))
        elif init == "he":
            w = rng.normal(0.0, np.sqrt(2.0 / fin), size=(fin, fout))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.w = self.register_parameter("w", ad.parameter(w, dtype=dtype), decay=False)
        self.b = self.register_parameter(
            "b", ad.parameter(np.zeros(fout), dtype=dtype), decay=False)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b


class BatchNorm2d(Module):
    def __init__(self, channels: int, *, dtype=np.float32,
                 momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.register_parameter(
            "gamma", ad.parameter(np.ones(channels), dtype=dtype), decay=False)
        self.beta = self.register_parameter(
            "beta", ad.parameter(np.zeros(channels), dtype=dtype), decay=False)
        self.running_mean = self.register_buffer(
            "running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = self.register_buffer(
            "running_var", np.ones(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.batch_norm2d(x, self.gamma, self.beta, self.running_mean,
                               self.running_var, training=self.training,
                               momentum=self.momentum, eps=self.eps)
