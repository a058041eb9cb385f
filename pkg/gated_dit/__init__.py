# gated_dit package initialization
