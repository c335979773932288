"""Grafted multimodal headline generation at desk scale."""

__version__ = "0.1.0"

# numpy must not load before the CLI applies its --threads flag, so the
# convenience re-exports resolve lazily
_LAZY = {
    "Tensor": "tensor",
    "no_grad": "tensor",
    "set_default_dtype": "tensor",
    "using_dtype": "tensor",
}


def __getattr__(name):
    if name in _LAZY:
        from importlib import import_module
        return getattr(import_module(f".{_LAZY[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_LAZY))
