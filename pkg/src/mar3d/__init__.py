"""Regularized 3D adversarial metal artifact reduction at desk scale."""
