"""Training-free registration on frozen backbone features (coarse convex search + Adam refinement)."""
