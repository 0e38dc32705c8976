"""Model components: flexible patch embedding, RoPE, ViT backbone, heads."""
