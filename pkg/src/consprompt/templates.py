"""Prompt templates: ``{input}`` / ``{input1}``.. ``{mask}`` placeholders.

Rendering is plain concatenation. Nothing is trimmed, re-cased or
separated, so whitespace belongs in the pattern itself.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

from .backend import MASK_TOKEN
from .errors import ContractError, LoadError, TemplateSyntaxError

_PLACEHOLDER = re.compile(r"\{(input\d*|mask)\}")


@dataclass(frozen=True)
class Template:
    id: str
    pattern: str
    # alternating literal text and slot names, e.g. ["", "input", " It is ", "mask", ""]
    parts: tuple = field(repr=False, compare=False, default=())

    @property
    def n_inputs(self) -> int:
        return sum(1 for i, p in enumerate(self.parts) if i % 2 and p != "mask")

    @property
    def input_slots(self) -> list[str]:
        return [p for i, p in enumerate(self.parts) if i % 2 and p != "mask"]


def parse_template(source: str, template_id: str = "main") -> Template:
    if not source:
        raise TemplateSyntaxError("empty template")
    parts: list[str] = []
    masks, inputs = [], {}
    pos = 0
    for m in _PLACEHOLDER.finditer(source):
        parts.append(source[pos : m.start()])
        name = m.group(1)
        parts.append(name)
        pos = m.end()
        if name == "mask":
            masks.append(m.start())
        else:
            if name in inputs:
                raise TemplateSyntaxError(f"duplicate placeholder {{{name}}}", m.start())
            inputs[name] = m.start()
    parts.append(source[pos:])

    if not masks:
        raise TemplateSyntaxError("missing {mask} placeholder", len(source))
    if len(masks) > 1:
        raise TemplateSyntaxError("duplicate {mask} placeholder", masks[1])
    if not inputs:
        raise TemplateSyntaxError("missing {input} placeholder", len(source))
    if "input" in inputs:
        if len(inputs) > 1:
            other = min(v for k, v in inputs.items() if k != "input")
            raise TemplateSyntaxError("cannot mix {input} with numbered inputs", other)
    else:
        want = {f"input{i}" for i in range(1, len(inputs) + 1)}
        if set(inputs) != want:
            bad = min(v for k, v in inputs.items() if k not in want)
            raise TemplateSyntaxError(
                "numbered inputs must run {input1}..{inputN} without gaps", bad
            )
    if MASK_TOKEN in source:
        raise TemplateSyntaxError(
            f"literal {MASK_TOKEN} in pattern; use {{mask}}", source.index(MASK_TOKEN)
        )
    return Template(template_id, source, tuple(parts))


@dataclass(frozen=True)
class PromptedExample:
    text: str
    mask_char_span: tuple[int, int]
    raw_text: str
    label: Optional[int] = None
    template_id: str = "main"
    fields: tuple[str, ...] = ()
    example_id: Optional[int] = None


def _slot_key(name: str) -> int:
    return 0 if name == "input" else int(name[5:]) - 1


def apply(
    template: Template,
    raw_text: Union[str, Sequence[str]],
    label: Optional[int] = None,
    example_id: Optional[int] = None,
) -> PromptedExample:
    fields = (raw_text,) if isinstance(raw_text, str) else tuple(raw_text)
    if len(fields) != template.n_inputs:
        raise ContractError(
            f"template {template.id!r} takes {template.n_inputs} inputs, got {len(fields)}"
        )
    for f in fields:
        if not f:
            raise ContractError("raw_text must be non-empty")
        if MASK_TOKEN in f:
            raise ContractError(f"raw_text may not contain {MASK_TOKEN}")
    out = []
    offset = 0
    span = None
    for i, part in enumerate(template.parts):
        if i % 2 == 0:
            piece = part
        elif part == "mask":
            piece = MASK_TOKEN
            span = (offset, offset + len(MASK_TOKEN))
        else:
            piece = fields[_slot_key(part)]
        out.append(piece)
        offset += len(piece)
    return PromptedExample(
        text="".join(out),
        mask_char_span=span,
        raw_text=join_fields(fields),
        label=label,
        template_id=template.id,
        fields=fields,
        example_id=example_id,
    )


def join_fields(fields: Sequence[str]) -> str:
    """Single-string view of the raw inputs, used for sentence similarity."""
    return fields[0] if len(fields) == 1 else " ".join(fields)


def strip(template: Template, text: str) -> tuple[str, ...]:
    """Remove the template scaffolding, returning the input fields."""
    regex = []
    slots = []
    for i, part in enumerate(template.parts):
        if i % 2 == 0:
            regex.append(re.escape(part))
        elif part == "mask":
            regex.append(re.escape(MASK_TOKEN))
        else:
            regex.append("(.+?)")
            slots.append(_slot_key(part))
    m = re.fullmatch("".join(regex), text, flags=re.DOTALL)
    if m is None:
        raise ContractError(f"text was not rendered by template {template.id!r}")
    fields = [""] * len(slots)
    for group, slot in zip(m.groups(), slots):
        fields[slot] = group
    return tuple(fields)


def load_template_set(path) -> list[Template]:
    """Read ``<id><TAB><pattern>`` lines; the first template is the main one."""
    path = Path(path)
    templates: list[Template] = []
    seen: dict[str, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "\t" in line:
                tid, pattern = line.split("\t", 1)
            else:
                bits = line.split(None, 1)
                tid, pattern = bits[0], (line[len(bits[0]) + 1 :] if len(bits) > 1 else "")
            if not tid or not pattern:
                raise LoadError("expected '<id><TAB><pattern>'", line=lineno)
            if tid in seen:
                raise LoadError(
                    f"duplicate template id {tid!r} (first on line {seen[tid]})", line=lineno
                )
            try:
                templates.append(parse_template(pattern, tid))
            except TemplateSyntaxError as exc:
                raise TemplateSyntaxError(exc.message, exc.position, line=lineno) from None
            seen[tid] = lineno
    if not templates:
        raise LoadError(f"no templates found in {path}")
    return templates
