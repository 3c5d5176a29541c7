"""Name -> factory registries for resource models and endpoint types.

Kept free of other popnet imports so that topology validation can consult
them without pulling in the models or the HTTP service.
"""

from typing import Any, Callable, Dict


class Registry:
    def __init__(self, what: str):
        self.what = what
        self._factories: Dict[str, Callable[..., Any]] = {}

    def register(self, name: str, factory: Callable[..., Any]) -> Callable[..., Any]:
        if not name:
            raise ValueError(f"{self.what} name must be non-empty")
        if name in self._factories:
            raise ValueError(f"{self.what} {name!r} is already registered")
        self._factories[name] = factory
        return factory

    def unregister(self, name: str) -> None:
        del self._factories[name]

    def get(self, name: str) -> Callable[..., Any]:
        try:
            return self._factories[name]
        except KeyError:
            raise KeyError(f"unknown {self.what} {name!r}") from None

    def __contains__(self, name: object) -> bool:
        return name in self._factories

    def names(self):
        return sorted(self._factories)


MODELS = Registry("resource model")
ENDPOINTS = Registry("endpoint type")
