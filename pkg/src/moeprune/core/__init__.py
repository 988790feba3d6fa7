"""Toy sparse MoE model, importance criteria, allocations, fitness, speculative decoding and search."""
