"""HTTP service exposing the optimizer, checker, metrics and SRAF seeding."""
