"""Three-phase pretraining: configs, schedules, checkpoints and training loops."""
