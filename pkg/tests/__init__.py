# Tests for the fedmeta simulator
