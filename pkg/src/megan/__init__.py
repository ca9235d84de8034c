"""megan: meta-gated transformer blocks driven by textual conditions.

A small, self-contained numpy stack: an autodiff tensor core, gate
activations with per-channel slopes, a hypernetwork that turns condition
text into those slopes, a desk-scale decoder-only transformer, the
two-stage training pipeline, text-generation metrics, and tooling for
analyzing the generated gate profiles.
"""

__version__ = "0.1.0"
