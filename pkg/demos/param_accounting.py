"""Parameter and FLOP accounting for the shipped isotropic presets."""

from agentattn import build, count_params, load_preset
from agentattn.bench import flops_model_forward

for name in ("agent-deit-t", "agent-deit-s", "agent-deit-b", "agent-deit-s-448"):
    preset = load_preset(name)
    rep = count_params(build(preset, dtype="f32"))
    flops = flops_model_forward(preset)
    print(f"{name:18s} {rep.total / 1e6:7.2f}M params  {flops / 1e9:6.2f}G FLOPs (multiply-add)")
    for comp, count in sorted(rep.components.items(), key=lambda kv: -kv[1])[:3]:
        print(f"    {comp:20s} {count:>12,d}")
