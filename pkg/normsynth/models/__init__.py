# Data types and their on-disk formats
