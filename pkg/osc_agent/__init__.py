"""
OSC Agent - Closed-Loop Discovery of Organic Solar Cell Acceptors

A Planner / Generator / Experimenter loop proposes one acceptor molecule per
iteration, scores it with surrogate PCE, HOMO/LUMO and SAscore models, and
keeps the best candidates in a growing database that feeds the next prompt.

Usage:
    osc-agent validate "c1ccccc1"             # Parse and canonicalize
    osc-agent ingest-reference refs.csv       # Standardize reference data
    osc-agent train --target pce --data refs.csv --out models/pce.json
    osc-agent run --config osc-agent.yaml     # Run the design loop
    osc-agent eval --generated gen.csv --reference refs.csv
    osc-agent report --db candidates.jsonl    # Best candidates so far
"""

__version__ = "0.3.0"
__author__ = "OSC Agent"
