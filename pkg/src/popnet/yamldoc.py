"""Strict reading of YAML documents with line/field context in errors.

Topology and scenario files are parsed from the composed node tree rather
than from plain ``yaml.safe_load`` output so that unknown or missing fields
can be reported together with the line they occur on.
"""

from typing import Any, List, Optional

import yaml
from yaml.constructor import SafeConstructor
from yaml.nodes import MappingNode, Node, ScalarNode, SequenceNode

_MISSING = object()


class DocumentError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.message = message
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


def compose(text: str) -> Node:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = mark.line + 1 if mark is not None else None
        raise DocumentError(f"syntax error: {exc.problem}", line=line) from None
    if node is None:
        raise DocumentError("empty document", line=1)
    return node


def line_of(node: Node) -> int:
    return node.start_mark.line + 1


def to_python(node: Node) -> Any:
    return SafeConstructor().construct_object(node, deep=True)


def join(path: str, key: Any) -> str:
    if isinstance(key, int):
        return f"{path}[{key}]"
    return f"{path}.{key}" if path else str(key)


def scalar(node: Node, path: str, kind: type) -> Any:
    if not isinstance(node, ScalarNode):
        raise DocumentError(f"expected a {kind.__name__}", line_of(node), path)
    value = to_python(node)
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is str and isinstance(value, (int, float)) and not isinstance(value, bool):
        # bare numeric-looking names such as `1` are still names
        return node.value
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise DocumentError(f"expected a {kind.__name__}, got {value!r}", line_of(node), path)
    return value


def sequence(node: Node, path: str) -> List[Node]:
    if not isinstance(node, SequenceNode):
        raise DocumentError("expected a list", line_of(node), path)
    return list(node.value)


class Fields:
    """View over a mapping node that tracks which keys were consumed."""

    def __init__(self, node: Node, path: str = ""):
        if not isinstance(node, MappingNode):
            raise DocumentError("expected a mapping", line_of(node), path or None)
        self.node = node
        self.path = path
        self._items = {}
        for key_node, value_node in node.value:
            key = to_python(key_node)
            if key in self._items:
                raise DocumentError("duplicate key", line_of(key_node), join(path, key))
            self._items[key] = (key_node, value_node)
        self._seen = set()

    @property
    def line(self) -> int:
        return line_of(self.node)

    def has(self, name: str) -> bool:
        return name in self._items

    def node_of(self, name: str) -> Node:
        self._seen.add(name)
        return self._items[name][1]

    def raw(self, name: str, default: Any = _MISSING) -> Optional[Node]:
        if name not in self._items:
            if default is _MISSING:
                raise DocumentError("missing required field", self.line, join(self.path, name))
            return default
        return self.node_of(name)

    def get(self, name: str, kind: type, default: Any = _MISSING) -> Any:
        node = self.raw(name, default)
        if node is default and default is not _MISSING:
            return default
        return scalar(node, join(self.path, name), kind)

    def finish(self) -> None:
        for key, (key_node, _) in self._items.items():
            if key not in self._seen:
                raise DocumentError("unknown field", line_of(key_node), join(self.path, key))
