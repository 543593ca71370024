"""Tiny layer base: parameter discovery for the optimizer and checkpoints."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Module:
    """Layers subclass this; parameters are Tensor attributes with
    requires_grad set, discovered recursively in attribute order."""

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = prefix + key
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_params(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_params(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
        return out

    def named_state(self, prefix: str = "") -> dict[str, float | int]:
        """Non-trainable scalars worth checkpointing (EMA trackers etc.).
        Subclasses with such state override local_state()."""
        out: dict[str, float | int] = {}
        for key, val in sorted(self.local_state().items()):
            out[prefix + key] = val
        for key, val in vars(self).items():
            name = prefix + key
            if isinstance(val, Module):
                out.update(val.named_state(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_state(f"{name}.{i}."))
        return out

    def load_state(self, prefix: str, state: dict) -> None:
        self.set_local_state({k[len(prefix):]: v for k, v in state.items()
                              if k.startswith(prefix) and "." not in k[len(prefix):]})
        for key, val in vars(self).items():
            name = prefix + key
            if isinstance(val, Module):
                val.load_state(name + ".", state)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        item.load_state(f"{name}.{i}.", state)

    def local_state(self) -> dict:
        return {}

    def set_local_state(self, state: dict) -> None:
        pass

    def param_count(self, include_bias: bool = True) -> int:
        total = 0
        for name, p in self.named_params().items():
            leaf = name.rsplit(".", 1)[-1]
            if not include_bias and (leaf.endswith("_b") or leaf == "b"):
                continue
            total += p.data.size
        return total


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = float(np.sqrt(1.0 / max(fan_in, 1)))
    return param(rng.uniform(-bound, bound, size=shape))
