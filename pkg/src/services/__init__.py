# Synthetic benchmark generation and experiment orchestration
