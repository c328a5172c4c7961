"""Python-style recipe code: parsing, canonical emission, symbolic triples.

Generated code follows the skeleton

    def main():
        # instruction
        # <step comment>
        ...
        def <Step_name>():
            h_1 = Operation(input, tool = oven, temp = 350 degrees F)

Parsing is line-based and tolerant: unparseable lines land in a diagnostics
list instead of aborting, and model output is never trusted beyond what the
parser can account for (dangling handles are flagged, not repaired).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources

from .errors import CodeParseError, ConfigError

_DEF_RE = re.compile(r"^\s*def\s+([A-Za-z_]\w*)\s*\(\s*\)\s*:\s*$")
_CALL_RE = re.compile(r"^\s*([A-Za-z_]\w*)\s*=\s*([A-Za-z_]\w*)\s*\((.*)\)\s*$")
_PARAM_RE = re.compile(r"^\s*([A-Za-z_][\w-]*)\s*=\s*(.*?)\s*$")
_HANDLE_RE = re.compile(r"^h_?\d+$")

# Parameter keys that name the same slot in the 8-name schema.
PARAMETER_ALIASES = {"temp": "temperature", "duration": "time"}


@dataclass(frozen=True)
class RecipeFunction:
    """One parsed step: ``<output_handle> = <operation>(inputs..., key = value...)``."""

    name: str
    operation: str
    inputs: tuple[str, ...]
    parameters: dict[str, str]
    output_handle: str


@dataclass(frozen=True)
class CodeRecipe:
    instruction_comments: tuple[str, ...]
    functions: tuple[RecipeFunction, ...]
    diagnostics: tuple[str, ...] = ()


@dataclass(frozen=True)
class SymbolicTriple:
    """(inputs, operation-with-parameters, output) refinement of one function."""

    inputs: tuple[str, ...]
    operation: str
    parameters: dict[str, str]
    output: str
    dangling: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {
            "i": list(self.inputs),
            "r": {"op": self.operation, **self.parameters},
            "o": self.output,
            "dangling": list(self.dangling),
        }


def instruction_to_function_name(step: str) -> str:
    """Join the step's words with underscores, dropping identifier-unsafe
    characters (including the trailing period)."""
    words = [re.sub(r"[^A-Za-z0-9_]", "", w) for w in step.split()]
    words = [w for w in words if w]
    if not words:
        raise ConfigError(f"step reduces to an empty identifier: {step!r}")
    return "_".join(words)


def _split_arguments(raw: str) -> list[str]:
    """Split on top-level commas, tolerating parentheses inside values."""
    parts: list[str] = []
    depth = 0
    current: list[str] = []
    for ch in raw:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth = max(0, depth - 1)
        if ch == "," and depth == 0:
            parts.append("".join(current))
            current = []
        else:
            current.append(ch)
    parts.append("".join(current))
    return [p.strip() for p in parts if p.strip()]


def _strip_quotes(value: str) -> str:
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
        return value[1:-1]
    return value


def parse_code_recipe(text: str) -> CodeRecipe:
    """Parse generated recipe code; raises CodeParseError only when no
    function call can be recovered at all."""
    comments: list[str] = []
    functions: list[RecipeFunction] = []
    diagnostics: list[str] = []
    pending_name = ""
    saw_body = False

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            comment = line.lstrip("#").strip()
            if saw_body or functions:
                diagnostics.append(f"line {lineno}: comment after function bodies ignored")
            elif comment and not (not comments and comment.lower() == "instruction"):
                comments.append(comment)
            continue

        def_match = _DEF_RE.match(line)
        if def_match:
            name = def_match.group(1)
            if name == "main":
                continue
            saw_body = True
            pending_name = name
            continue

        call_match = _CALL_RE.match(line)
        if call_match:
            saw_body = True
            handle, operation, raw_args = call_match.groups()
            inputs: list[str] = []
            parameters: dict[str, str] = {}
            for arg in _split_arguments(raw_args):
                param = _PARAM_RE.match(arg)
                if param and "=" in arg:
                    parameters[param.group(1)] = _strip_quotes(param.group(2))
                else:
                    cleaned = _strip_quotes(arg.strip("() "))
                    if cleaned:
                        inputs.append(cleaned)
            functions.append(RecipeFunction(
                name=pending_name,
                operation=operation,
                inputs=tuple(inputs),
                parameters=parameters,
                output_handle=handle,
            ))
            pending_name = ""
            continue

        diagnostics.append(f"line {lineno}: unparseable: {line}")

    if not functions:
        raise CodeParseError("no parseable function calls found", diagnostics)
    return CodeRecipe(
        instruction_comments=tuple(comments),
        functions=tuple(functions),
        diagnostics=tuple(diagnostics),
    )


def emit_code_recipe(code: CodeRecipe) -> str:
    """Canonical text form; parse -> emit -> parse is a fixpoint."""
    lines = ["def main():", "    # instruction"]
    lines.extend(f"    # {comment}" for comment in code.instruction_comments)
    for fn in code.functions:
        lines.append("")
        name = fn.name or (f"step_{fn.output_handle}" if fn.output_handle else "step")
        lines.append(f"    def {name}():")
        args = list(fn.inputs) + [f"{k} = {v}" for k, v in fn.parameters.items()]
        lines.append(f"        {fn.output_handle} = {fn.operation}({', '.join(args)})")
    return "\n".join(lines) + "\n"


def code_from_instructions(steps: list[str] | tuple[str, ...]) -> list[str]:
    """Function names derived from instruction steps by the underscore rule."""
    return [instruction_to_function_name(step) for step in steps]


def refine_to_triples(code: CodeRecipe) -> list[SymbolicTriple]:
    """One triple per function, in order; handle inputs must refer to an
    earlier output, otherwise they are flagged as dangling."""
    produced: set[str] = set()
    triples: list[SymbolicTriple] = []
    for fn in code.functions:
        dangling = tuple(i for i in fn.inputs
                         if _HANDLE_RE.match(i) and i not in produced)
        triples.append(SymbolicTriple(
            inputs=fn.inputs,
            operation=fn.operation,
            parameters=dict(fn.parameters),
            output=fn.output_handle,
            dangling=dangling,
        ))
        produced.add(fn.output_handle)
    return triples


# ---------------------------------------------------------------------------
# Operation registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OperationRegistry:
    """Configurable set of known cooking operations plus the permitted
    parameter names. Registry contents are data, not ground truth."""

    operations: tuple[str, ...]
    parameter_schema: tuple[str, ...]

    def validate(self) -> None:
        if not self.operations:
            raise ConfigError("operation registry must be nonempty")
        lowered = [op.lower() for op in self.operations]
        if len(set(lowered)) != len(lowered):
            raise ConfigError("operation registry contains duplicates")
        if len(set(self.parameter_schema)) != len(self.parameter_schema):
            raise ConfigError("parameter names must be unique")


def default_registry() -> OperationRegistry:
    data = json.loads(
        resources.files("plate2recipe").joinpath("data/operations.json").read_text())
    registry = OperationRegistry(
        operations=tuple(data["operations"]),
        parameter_schema=tuple(data["parameter_schema"]),
    )
    registry.validate()
    return registry


def load_registry(path: str) -> OperationRegistry:
    with open(path, "r", encoding="utf-8") as handle:
        data = json.load(handle)
    registry = OperationRegistry(
        operations=tuple(data["operations"]),
        parameter_schema=tuple(data["parameter_schema"]),
    )
    registry.validate()
    return registry


def check_operation_coverage(code: CodeRecipe,
                             registry: OperationRegistry) -> dict:
    """Fraction of functions whose operation is registered, plus the unknowns."""
    registry.validate()
    known = {op.lower() for op in registry.operations}
    unknown: list[str] = []
    covered = 0
    for fn in code.functions:
        if fn.operation.lower() in known:
            covered += 1
        elif fn.operation not in unknown:
            unknown.append(fn.operation)
    fraction = covered / len(code.functions) if code.functions else 1.0
    return {"covered": fraction, "unknown": unknown}


def unknown_parameters(code: CodeRecipe, registry: OperationRegistry) -> list[str]:
    """Parameter keys (after alias folding) outside the registry schema."""
    schema = set(registry.parameter_schema)
    seen: list[str] = []
    for fn in code.functions:
        for key in fn.parameters:
            folded = PARAMETER_ALIASES.get(key, key)
            if folded not in schema and key not in seen:
                seen.append(key)
    return seen
