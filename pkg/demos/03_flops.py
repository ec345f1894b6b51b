"""Analytic cost of a DeiT-Tiny-shaped model with ToSA layers."""

from tosa.costmodel import deit_tiny_config, layer_flops, model_cost, scope_reductions

base = model_cost(deit_tiny_config(), "mac", all_standard=True)
print(f"all-standard DeiT-Tiny: {base.total / 1e9:.3f} GMAC")

print("\nreduction at r=0.8 (ToSA at 2,4,6,8,10)")
for include in (True, False):
    red = scope_reductions(deit_tiny_config(0.8), "mac", include_selector=include)
    label = "with selector" if include else "without selector"
    print(f"  {label:>17}: " + ", ".join(f"{k} {100 * v:.1f}%" for k, v in red.items()))

print("\none ToSA layer, multiply-add = 2")
for k, v in layer_flops(197, 192, 3, "tosa", 0.8).items():
    print(f"  {k:>13} {v / 1e6:8.2f} MFLOP")

print("\nreduction vs ratio (full_layer scope)")
for r in (1.0, 0.9, 0.8, 0.7, 0.5):
    rep = model_cost(deit_tiny_config(r, "full_layer"), "mac")
    print(f"  r={r:.1f}: {100 * rep.reduction:5.1f}%")
