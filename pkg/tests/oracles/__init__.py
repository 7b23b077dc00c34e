"""Independent brute-force reference implementations used by the tests."""
