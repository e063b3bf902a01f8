"""U-shaped normalizing flow with a contrario anomaly detection."""
