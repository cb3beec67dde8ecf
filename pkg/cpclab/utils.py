import dataclasses
import json
import math
import re
from collections import OrderedDict
from enum import Enum
from typing import Any, Callable, Dict, Iterable, Mapping

import numpy as np


class singledispatchbymatchfunction:
    """
    Inspired by @singledispatch, this is a variant that works using a matcher function
    instead of relying on the type of the first argument.
    The register method can be used to register a new matcher, which is passed as the first argument:
    """

    def __init__(self, default: Callable):
        self.registry: Dict[Callable, Callable] = OrderedDict()
        self.default = default

    def __call__(self, *args, **kwargs):
        for matcher_function, final_method in self.registry.items():
            # Register order is important. First one that matches, runs.
            if matcher_function(args[0]):
                return final_method(*args, **kwargs)

        return self.default(*args, **kwargs)

    def register(self, matcher_function: Callable[[Any], bool], func=None):
        if func is None:
            return lambda f: self.register(matcher_function, f)
        self.registry[matcher_function] = func
        return func


def safe_isinstance(cls):
    def safe_isinstance_checker(arg):
        try:
            return isinstance(arg, cls)
        except TypeError:
            pass

    return safe_isinstance_checker


def is_dataclass_instance(arg):
    return dataclasses.is_dataclass(arg) and not isinstance(arg, type)


@singledispatchbymatchfunction
def to_jsonable(value):
    """Convert metrics, fits and records into plain JSON values.

    Non-finite floats become ``None`` so every emitted line is strict JSON.
    """
    raise TypeError("Expected a JSON-convertible value, but got: {!r}".format(value))


@to_jsonable.register(safe_isinstance(Enum))
def _convert_enum(value):
    return to_jsonable(value.value)


@to_jsonable.register(lambda value: value is None or isinstance(value, (bool, int, str)))
def _convert_plain(value):
    return value


@to_jsonable.register(safe_isinstance(np.generic))
def _convert_numpy_scalar(value):
    return to_jsonable(value.item())


@to_jsonable.register(safe_isinstance(float))
def _convert_float(value):
    return value if math.isfinite(value) else None


@to_jsonable.register(safe_isinstance(np.ndarray))
def _convert_numpy_array(value):
    return [to_jsonable(item) for item in value.tolist()]


@to_jsonable.register(safe_isinstance(Mapping))
def _convert_mapping(value):
    return {str(to_jsonable(key)): to_jsonable(item) for key, item in value.items()}


@to_jsonable.register(safe_isinstance((list, tuple)))
def _convert_sequence(value):
    return [to_jsonable(item) for item in value]


@to_jsonable.register(is_dataclass_instance)
def _convert_dataclass(value):
    return {
        field.name: to_jsonable(getattr(value, field.name))
        for field in dataclasses.fields(value)
        if field.metadata.get("serialize", True)
    }


def dumps_line(value):
    """Serialize ``value`` as one deterministic JSON line (no trailing newline)."""
    return json.dumps(to_jsonable(value), sort_keys=True, allow_nan=False)


def rng_streams(seed: int, names: Iterable[str]) -> Dict[str, np.random.Generator]:
    """Independent generators, one per concern, all derived from ``seed``.

    Adding a stream at the end of ``names`` leaves the earlier streams unchanged.
    """
    names = list(names)
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def set_dotted(data: dict, path: str, value):
    """Set ``data["a"]["b"] = value`` for ``path == "a.b"``, creating levels as needed."""
    keys = path.split(".")
    if not all(keys):
        raise ValueError("Expected a dotted field path, but got: {!r}".format(path))
    target = data
    for key in keys[:-1]:
        child = target.setdefault(key, {})
        if not isinstance(child, dict):
            raise ValueError("{!r} is not a section, cannot set {!r}".format(key, path))
        target = child
    target[keys[-1]] = value
    return data


_re_unsafe_path_chars = re.compile(r"[^A-Za-z0-9._=,+-]")


def to_cell_name(assignments: Mapping[str, Any]) -> str:
    """Directory name for one sweep cell, e.g. ``trainer.alpha=0.5,trainer.tau=0.6``."""
    if not assignments:
        return "default"
    parts = ["{}={}".format(key, assignments[key]) for key in sorted(assignments)]
    return _re_unsafe_path_chars.sub("_", ",".join(parts))
