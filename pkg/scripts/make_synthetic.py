#!/usr/bin/env python3
"""Generate the bundled synthetic CTR stream (see dcn2.synth)."""

from dcn2.synth import main

if __name__ == "__main__":
    main()
