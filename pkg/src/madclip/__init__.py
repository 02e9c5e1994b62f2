"""Few-shot anomaly detection with dual-branch CLIP adapters and learnable prompts."""
