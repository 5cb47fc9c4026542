# Time-inconsistent optimization over controlled BSDEs
