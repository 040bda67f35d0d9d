"""Dense linear algebra, differentiation and trace estimation kernels."""
