"""Self-supervised and vision-language objectives."""
