# Numerical services: trees, BSDE solving, duality, dynamic utilities, master equation
