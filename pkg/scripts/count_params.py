"""Itemized parameter counts for every preset, with tree-mode overhead."""

from treeattn.model import PRESETS, count_parameters, preset

for name in sorted(PRESETS):
    print(f"== {name}")
    print("\n".join(count_parameters(preset(name)).lines()))
    print()
