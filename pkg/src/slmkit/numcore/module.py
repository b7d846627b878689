"""Parameter containers with dotted-path naming."""

from __future__ import annotations

from typing import Iterator

from .tensor import Parameter


class Module:
    """Parameter container; names are dotted attribute paths."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = prefix + key
            if isinstance(value, Parameter):
                value.name = name
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        item.name = f"{name}.{i}"
                        yield item.name, item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict:
        return dict(self.named_parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters().values():
            p.trainable = flag

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None
