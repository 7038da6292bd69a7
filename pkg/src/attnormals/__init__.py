"""Point-cloud normal estimation with temperature-adjusted self-attention."""
