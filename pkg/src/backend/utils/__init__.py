# Backend utilities package
