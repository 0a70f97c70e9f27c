"""Dataset distillation toolkit: squeeze, recover with a crop curriculum, relabel, post-train."""
