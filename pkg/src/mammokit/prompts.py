"""Render prompting regimes into final prompt text plus ordered image attachments.

Templates are editable text assets, not code; ``template_digest`` records
which exact text was in force for a run. Rendering is pure: identical
inputs produce byte-identical text.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

SCHEMA_KEYS = ("breast_density", "findings", "BI-RADS", "suspicion")

SCHEMA_BLOCK = """Here is the JSON format you should follow for your response:
{
    "breast_density": "<ACR A|B|C|D> followed by a brief description of the density",
    "findings": "<Summary of any abnormalities as described above in one sentence>",
    "BI-RADS": "<1|2|3|4|5> followed by a brief description of the BI-RADS category>",
    "suspicion": "<healthy|benign|suspicious>"
}"""

EXAMPLES_PLACEHOLDER = "{examples_block}"

FEW_SHOT_COUNT = 5


class PromptMode(str, Enum):
    ZERO_SHOT = "zero_shot"
    FEW_SHOT = "few_shot"
    COT = "cot"
    RAG_FEW_SHOT = "rag_few_shot"


# Template file backing each mode; RAG reuses the few-shot shape, which is
# the zero-shot instructions plus an examples section.
_MODE_FILES = {
    PromptMode.ZERO_SHOT: "zero_shot.txt",
    PromptMode.FEW_SHOT: "few_shot.txt",
    PromptMode.COT: "cot.txt",
    PromptMode.RAG_FEW_SHOT: "few_shot.txt",
}

_EXAMPLE_MODES = (PromptMode.FEW_SHOT, PromptMode.RAG_FEW_SHOT)


class PromptError(Exception):
    pass


class UnknownMode(PromptError):
    pass


class WrongExemplarCount(PromptError):
    def __init__(self, mode: "PromptMode", got: int, expected: str):
        super().__init__(f"{mode.value} requires {expected} exemplars, got {got}")
        self.mode = mode
        self.got = got


class MissingPlaceholder(PromptError):
    pass


class EmptyRetrieval(PromptError):
    pass


class InvalidExemplar(PromptError):
    pass


@dataclass(frozen=True)
class Exemplar:
    image_id: str
    report_json: str
    image_ref: str | None = None
    image_bytes: bytes | None = None

    def __post_init__(self):
        try:
            obj = json.loads(self.report_json)
        except ValueError as exc:
            raise InvalidExemplar(f"exemplar {self.image_id}: report_json does not parse: {exc}") from exc
        missing = [k for k in ("image_id", *SCHEMA_KEYS) if k not in obj]
        if missing:
            raise InvalidExemplar(f"exemplar {self.image_id}: report_json missing keys {missing}")


@dataclass(frozen=True)
class PromptTemplate:
    mode: PromptMode
    body: str
    schema_block: str = SCHEMA_BLOCK

    def __post_init__(self):
        if self.schema_block not in self.body:
            raise PromptError(f"{self.mode.value} template does not contain the output schema block")
        if self.mode in _EXAMPLE_MODES and EXAMPLES_PLACEHOLDER not in self.body:
            raise MissingPlaceholder(f"{self.mode.value} template lacks {EXAMPLES_PLACEHOLDER}")


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    attachments: tuple[bytes, ...]
    mode: PromptMode
    exemplar_ids: tuple[str, ...]


def mode_from_string(name: str) -> PromptMode:
    try:
        return PromptMode(name)
    except ValueError:
        raise UnknownMode(f"unknown prompt mode {name!r}") from None


class TemplateLibrary:
    """Loads the template assets once; rendering is reentrant afterwards.

    ``template_dir`` overrides the packaged assets (used to detect template
    drift between runs); ``single_view`` selects the one-image layout
    wording used for single-view datasets.
    """

    def __init__(self, template_dir: str | Path | None = None, single_view: bool = False):
        self.single_view = single_view
        self._templates: dict[PromptMode, PromptTemplate] = {}
        suffix = "_single_view" if single_view else ""
        for mode, filename in _MODE_FILES.items():
            stem = filename.removesuffix(".txt")
            name = f"{stem}{suffix}.txt"
            if template_dir is not None:
                text = (Path(template_dir) / name).read_text(encoding="utf-8")
            else:
                text = resources.files("mammokit.templates").joinpath(name).read_text(encoding="utf-8")
            self._templates[mode] = PromptTemplate(mode=mode, body=text)

    def template(self, mode: PromptMode | str) -> PromptTemplate:
        mode = mode_from_string(mode) if isinstance(mode, str) else mode
        if mode not in self._templates:
            raise UnknownMode(f"unknown prompt mode {mode!r}")
        return self._templates[mode]

    def digest(self, mode: PromptMode | str) -> str:
        """Stable content hash of the template text in force for `mode`."""
        return hashlib.sha256(self.template(mode).body.encode("utf-8")).hexdigest()

    def render(
        self,
        mode: PromptMode | str,
        query_image: bytes,
        exemplars: list[Exemplar] | tuple[Exemplar, ...] = (),
        attach_exemplar_images: bool = False,
    ) -> RenderedPrompt:
        """Fill the mode's template and order the image attachments.

        Zero-shot and CoT take no exemplars; few-shot takes exactly five;
        RAG takes one to five, already ordered by descending similarity.
        The query image is always the last attachment.
        """
        mode = mode_from_string(mode) if isinstance(mode, str) else mode
        template = self.template(mode)
        n = len(exemplars)
        if mode in (PromptMode.ZERO_SHOT, PromptMode.COT):
            if n != 0:
                raise WrongExemplarCount(mode, n, "no")
        elif mode is PromptMode.FEW_SHOT:
            if n != FEW_SHOT_COUNT:
                raise WrongExemplarCount(mode, n, str(FEW_SHOT_COUNT))
        elif mode is PromptMode.RAG_FEW_SHOT:
            if not 1 <= n <= FEW_SHOT_COUNT:
                raise WrongExemplarCount(mode, n, f"1..{FEW_SHOT_COUNT}")

        text = template.body
        if mode in _EXAMPLE_MODES:
            blocks = [f"Example {i}:\n{e.report_json}" for i, e in enumerate(exemplars, start=1)]
            text = text.replace(EXAMPLES_PLACEHOLDER, "\n\n".join(blocks))

        attachments: list[bytes] = []
        if attach_exemplar_images:
            attachments.extend(e.image_bytes for e in exemplars if e.image_bytes is not None)
        attachments.append(query_image)
        return RenderedPrompt(
            text=text,
            attachments=tuple(attachments),
            mode=mode,
            exemplar_ids=tuple(e.image_id for e in exemplars),
        )

    def render_rag(
        self,
        query_image: bytes,
        retrieved: list[Exemplar] | tuple[Exemplar, ...],
        attach_exemplar_images: bool = False,
    ) -> RenderedPrompt:
        """Few-shot prompt whose examples are the retrieved records, in
        retrieval order (descending similarity)."""
        if not retrieved:
            raise EmptyRetrieval("retrieval returned no exemplars")
        return self.render(
            PromptMode.RAG_FEW_SHOT,
            query_image,
            exemplars=retrieved,
            attach_exemplar_images=attach_exemplar_images,
        )


def load_fixed_exemplars(path: str | Path | None = None) -> list[Exemplar]:
    """The five fixed few-shot exemplars (packaged fixture unless overridden)."""
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
    else:
        text = resources.files("mammokit.fixtures").joinpath("few_shot_exemplars.jsonl").read_text(
            encoding="utf-8"
        )
    exemplars = []
    for line in text.splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        exemplars.append(Exemplar(image_id=obj["image_id"], report_json=json.dumps(obj, indent=2)))
    return exemplars
