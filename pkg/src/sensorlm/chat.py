"""Sensor-grounded dialog REPL over an instruction-tuned checkpoint.

Loads sensor records, takes typed questions, and answers by greedy
decoding from the merged model, alongside the numeric head's prediction
and the fusion gate weights. A scripted mode replays a question file for
non-interactive use.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .adapter import merged_forward
from .data import InstructionSample, read_records
from .lm import ByteTokenizer, generate_greedy
from .tasks import registry_by_name

HELP = """commands:
  :load <path> [index]   load a sensor record (default index 0)
  :task <name>           switch the active task
  :quit                  exit
  :help                  this text
anything else is asked as a question about the loaded record."""

MAX_ANSWER_BYTES = 120


class ChatSession:
    def __init__(self, model, registry=None):
        self.model = model
        self.registry = model.registry if registry is None else registry
        self.by_name = registry_by_name(self.registry)
        self.tokenizer = ByteTokenizer()
        self.sample = None
        self.spec = None

    def load(self, path, index: int = 0) -> str:
        records = read_records(path, strip_latent=True)
        if not records:
            raise ValueError(f"{path} holds no records")
        if not (0 <= index < len(records)):
            raise ValueError(f"index {index} out of range ({len(records)} records)")
        rec = records[index]
        self.sample = rec.base if isinstance(rec, InstructionSample) else rec
        self.spec = self.model.spec(self.sample.task_id)
        return (f"loaded {self.sample.sample_id} (task {self.spec.name}, "
                f"modalities {[k.key for k in self.sample.payloads]})")

    def set_task(self, name: str) -> str:
        if name not in self.by_name:
            raise ValueError(f"unknown task {name!r}")
        self.spec = self.by_name[name]
        return f"task set to {name}"

    def ask(self, question: str) -> list[str]:
        if self.sample is None:
            return ["no record loaded; use :load <path> [index]"]
        from .train import instruction_prompt_ids
        spec = self.spec
        with ad.no_grad():
            out = merged_forward(self.model, self.sample, spec.task_id)
            prompt = instruction_prompt_ids(question, self.tokenizer)
            prefix = self._prefix()
            answer_ids = generate_greedy(self.model.lm, prefix, prompt, MAX_ANSWER_BYTES)
        answer = self.tokenizer.detokenize(answer_ids).strip()
        head_row = out.head_output.data[0]
        if spec.is_classification:
            head_desc = spec.classes[int(np.argmax(head_row))]
        elif head_row.size <= 4:
            head_desc = ", ".join(f"{v:.2f}" for v in head_row)
        else:
            head_desc = f"mean {float(head_row.mean()):.2f} over {head_row.size} values"
        gates = " ".join(f"{k}={v:.2f}" for k, v in sorted(out.gate_weights.items()))
        return [f"answer: {answer}" if answer else "answer: (empty)",
                f"head[{spec.name}]: {head_desc} {spec.units}",
                f"gates: {gates}"]

    def _prefix(self):
        from .adapter import adapter_project
        from .encoders import encode_sample
        from .fusion import gate_weights as gw, late_fuse
        blocks = encode_sample(self.sample, self.model.encoder_config, self.model.params)
        weights, _ = gw(blocks, self.spec.task_id, self.model.params,
                        self.model.gate_temperature)
        fused = late_fuse(blocks, weights)
        return adapter_project(fused, self.spec.task_id, self.model.adapter_config,
                               self.model.params)


def chat_repl(model, lines, out=print, interactive: bool = False) -> int:
    """Drive a session over an iterable of input lines. Returns 0 on a
    clean exit. Errors from user commands are printed and the session
    continues."""
    session = ChatSession(model)
    if interactive:
        out("sensor dialog; :help for commands")
    for line in lines:
        line = line.strip()
        if not line:
            continue
        if not interactive:
            out(f"> {line}")
        if line == ":quit":
            out("bye")
            return 0
        try:
            if line == ":help":
                out(HELP)
            elif line.startswith(":load"):
                parts = line.split()
                if len(parts) < 2:
                    raise ValueError(":load needs a path")
                idx = int(parts[2]) if len(parts) > 2 else 0
                out(session.load(parts[1], idx))
            elif line.startswith(":task"):
                parts = line.split()
                if len(parts) != 2:
                    raise ValueError(":task needs a task name")
                out(session.set_task(parts[1]))
            elif line.startswith(":"):
                out(f"unknown command {line.split()[0]!r}")
                out(HELP)
            else:
                for reply in session.ask(line):
                    out(reply)
        except (ValueError, OSError) as exc:
            out(f"error: {exc}")
    return 0
