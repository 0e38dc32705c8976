"""Multi-crop views, CT intensity augmentations and RCC masking."""
