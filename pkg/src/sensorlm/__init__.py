"""Sensor-conditioned language modeling on synthetic multimodal tasks.

A frozen byte-level causal LM is conditioned on multisensory inputs
through per-modality encoders, gated late fusion, and a multitask prefix
adapter; training, evaluation, experiment harnesses, and a dialog REPL
sit on top.
"""

__version__ = "0.1.0"
