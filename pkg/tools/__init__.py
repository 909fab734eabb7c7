# Noise source estimator tools package
