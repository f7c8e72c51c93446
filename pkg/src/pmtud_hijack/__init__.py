"""Off-path TCP hijacking via PMTUD and NAT port side channels, simulated."""
