# Algorithms and the batch pipeline
