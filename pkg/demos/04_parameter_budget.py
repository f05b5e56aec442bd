"""How many parameters does each adapter placement train?

Counts for the desk-sized U-Net and the 24.3M-parameter configuration at
rank 2, with the early head left out of the totals. A full fine-tune of the
same layers is shown for comparison.
"""

from convlora import adapter as lora
from convlora.metrics import param_report
from convlora.unet import NAMED_CONFIGS, Phase, apply_freeze_policy, build_model, inject_convlora

for name in ("desk", "paper-scale"):
    print(f"== {name}")
    for selector in ("1", "1-2", "1-3", "all"):
        model = build_model(NAMED_CONFIGS[name](), seed=0)
        inject_convlora(model, selector, r=2)
        apply_freeze_policy(model, Phase.ADAPT)
        rep = param_report(model, include_esh=False)
        adapters = [a for _, a in model.adapters()]
        full = sum(lora.full_param_count(a.spec) for a in adapters)
        print(
            f"blocks {selector:4s} trainable {rep.trainable_params:>7,} of {rep.total_params:>11,}"
            f"  ({100 * rep.trainable_fraction:.3f}%, reduction {rep.reduction_percent:.2f}%)"
            f"  full fine-tune of those convs: {full:,}"
        )

# the per-layer breakdown for one case
model = build_model(NAMED_CONFIGS["desk"](), seed=0)
inject_convlora(model, "1", r=2)
apply_freeze_policy(model, Phase.ADAPT)
print()
print("\n".join(param_report(model, include_esh=False).format().splitlines()[:6]))
