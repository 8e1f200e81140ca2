# Tests for the importance-weighted adversarial inference toolkit
