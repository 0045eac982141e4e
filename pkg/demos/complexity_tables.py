"""Parameter and FLOP tables for the default model and the ablation axes.

    python demos/complexity_tables.py
"""

from sedmamba.complexity import ablation_configs, complexity_report, sweep_report
from sedmamba.model import ModelConfig

print(complexity_report(ModelConfig()).table())
print()

# With a 1000-wide input the counts land on the reference ablation figures.
base = ModelConfig(d_model=1000)
print("1000-wide input")
print(sweep_report([(axis, v, c) for axis, items in ablation_configs(base).items() for v, c in items]).table())
print()
print("1536-wide input (default)")
print(sweep_report(None).table())
