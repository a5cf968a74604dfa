"""Value model: configurable formula aggregating per-task scores into one.

Configurations arrive as a JSON tree, e.g.::

    {"op": "add", "args": [
        {"op": "mul", "args": [{"op": "const", "value": 0.5},
                               {"op": "task", "task": "like"}]},
        {"op": "mul", "args": [{"op": "const", "value": 0.3},
                               {"op": "task", "task": "share"}]}]}

Supported ops: const, task, add, sub, mul, div, min, max, clamp (lo/hi),
if (cond {left, cmp, right}, then, else) with cmp one of < <= > >= ==.
Evaluation is strict (both branches of an ``if`` are computed, then selected)
and vectorizes over per-item score arrays; division by zero in any evaluated
lane raises.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivByZero, UnknownTask

MAX_DEPTH = 64

_CMP_OPS = ("<", "<=", ">", ">=", "==")


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class TaskScore:
    task: str


@dataclass(frozen=True)
class Add:
    args: tuple


@dataclass(frozen=True)
class Sub:
    left: object
    right: object


@dataclass(frozen=True)
class Mul:
    args: tuple


@dataclass(frozen=True)
class Div:
    num: object
    den: object


@dataclass(frozen=True)
class Min:
    args: tuple


@dataclass(frozen=True)
class Max:
    args: tuple


@dataclass(frozen=True)
class Clamp:
    arg: object
    lo: float
    hi: float


@dataclass(frozen=True)
class Cmp:
    left: object
    op: str
    right: object


@dataclass(frozen=True)
class If:
    cond: Cmp
    then: object
    orelse: object


ValueModelConfig = object  # any node above


def parse_value_model(spec: dict, depth: int = 0) -> ValueModelConfig:
    """Validate and convert a JSON dict into a formula tree."""
    if depth > MAX_DEPTH:
        raise ValueError(f"formula deeper than {MAX_DEPTH}")
    if not isinstance(spec, dict) or "op" not in spec:
        raise ValueError(f"formula node must be an object with an 'op': {spec!r}")
    op = spec["op"]
    if op == "const":
        return Const(float(spec["value"]))
    if op == "task":
        return TaskScore(str(spec["task"]))
    if op in ("add", "mul", "min", "max"):
        args = tuple(parse_value_model(a, depth + 1) for a in spec["args"])
        if not args:
            raise ValueError(f"'{op}' needs at least one argument")
        return {"add": Add, "mul": Mul, "min": Min, "max": Max}[op](args)
    if op in ("sub", "div"):
        args = [parse_value_model(a, depth + 1) for a in spec["args"]]
        if len(args) != 2:
            raise ValueError(f"'{op}' takes exactly two arguments")
        return Sub(*args) if op == "sub" else Div(*args)
    if op == "clamp":
        (arg,) = [parse_value_model(a, depth + 1) for a in spec["args"]]
        return Clamp(arg, float(spec["lo"]), float(spec["hi"]))
    if op == "if":
        cond = spec["cond"]
        if cond.get("cmp") not in _CMP_OPS:
            raise ValueError(f"unknown comparison {cond.get('cmp')!r}")
        return If(cond=Cmp(parse_value_model(cond["left"], depth + 1), cond["cmp"],
                           parse_value_model(cond["right"], depth + 1)),
                  then=parse_value_model(spec["then"], depth + 1),
                  orelse=parse_value_model(spec["else"], depth + 1))
    raise ValueError(f"unknown formula op {op!r}")


def value_model_to_dict(node: ValueModelConfig) -> dict:
    if isinstance(node, Const):
        return {"op": "const", "value": node.value}
    if isinstance(node, TaskScore):
        return {"op": "task", "task": node.task}
    if isinstance(node, Add):
        return {"op": "add", "args": [value_model_to_dict(a) for a in node.args]}
    if isinstance(node, Mul):
        return {"op": "mul", "args": [value_model_to_dict(a) for a in node.args]}
    if isinstance(node, Min):
        return {"op": "min", "args": [value_model_to_dict(a) for a in node.args]}
    if isinstance(node, Max):
        return {"op": "max", "args": [value_model_to_dict(a) for a in node.args]}
    if isinstance(node, Sub):
        return {"op": "sub", "args": [value_model_to_dict(node.left),
                                      value_model_to_dict(node.right)]}
    if isinstance(node, Div):
        return {"op": "div", "args": [value_model_to_dict(node.num),
                                      value_model_to_dict(node.den)]}
    if isinstance(node, Clamp):
        return {"op": "clamp", "args": [value_model_to_dict(node.arg)],
                "lo": node.lo, "hi": node.hi}
    if isinstance(node, If):
        return {"op": "if",
                "cond": {"left": value_model_to_dict(node.cond.left),
                         "cmp": node.cond.op,
                         "right": value_model_to_dict(node.cond.right)},
                "then": value_model_to_dict(node.then),
                "else": value_model_to_dict(node.orelse)}
    raise TypeError(f"not a formula node: {node!r}")


def value_model_eval(cfg: ValueModelConfig,
                     task_scores: dict[str, float | np.ndarray]) -> float | np.ndarray:
    """Evaluate a formula over scalar or per-item array scores."""

    def walk(node):
        if isinstance(node, Const):
            return node.value
        if isinstance(node, TaskScore):
            if node.task not in task_scores:
                raise UnknownTask(node.task)
            return np.asarray(task_scores[node.task], dtype=np.float64)
        if isinstance(node, Add):
            acc = walk(node.args[0])
            for a in node.args[1:]:
                acc = acc + walk(a)
            return acc
        if isinstance(node, Mul):
            acc = walk(node.args[0])
            for a in node.args[1:]:
                acc = acc * walk(a)
            return acc
        if isinstance(node, Min):
            acc = walk(node.args[0])
            for a in node.args[1:]:
                acc = np.minimum(acc, walk(a))
            return acc
        if isinstance(node, Max):
            acc = walk(node.args[0])
            for a in node.args[1:]:
                acc = np.maximum(acc, walk(a))
            return acc
        if isinstance(node, Sub):
            return walk(node.left) - walk(node.right)
        if isinstance(node, Div):
            den = walk(node.den)
            if np.any(np.asarray(den) == 0.0):
                raise DivByZero("division by zero in value model")
            return walk(node.num) / den
        if isinstance(node, Clamp):
            return np.clip(walk(node.arg), node.lo, node.hi)
        if isinstance(node, If):
            ops = {"<": np.less, "<=": np.less_equal, ">": np.greater,
                   ">=": np.greater_equal, "==": np.equal}
            cond = ops[node.cond.op](walk(node.cond.left), walk(node.cond.right))
            return np.where(cond, walk(node.then), walk(node.orelse))
        raise TypeError(f"not a formula node: {node!r}")

    result = walk(cfg)
    arr = np.asarray(result, dtype=np.float64)
    return float(arr) if arr.ndim == 0 else arr


def mean_of_tasks(task_names: list[str]) -> ValueModelConfig:
    """The default aggregation: unweighted mean of every task's score."""
    total = Add(tuple(TaskScore(t) for t in task_names))
    if len(task_names) == 1:
        return total.args[0]
    return Mul((Const(1.0 / len(task_names)), total))
