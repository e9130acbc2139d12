# Variational Imaging Prior package
