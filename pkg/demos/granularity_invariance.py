"""Split each MoE layer into expert blocks of every possible size and check that
remote evaluation through the simulated FaaS platform reproduces the monolithic
logits bit for bit, while the per-layer fan-out shrinks as blocks grow."""
import numpy as np

from serverless_moe import ModelConfig, Orchestrator, OrchestratorConfig, forward, pack_blocks, tokenize
from serverless_moe.faas import InProcessRuntime, SimPlatform, register_blocks

cfg = ModelConfig()
ids = tokenize("experts as functions")
reference = forward(ids, cfg)
print(f"monolithic next token: {int(np.argmax(reference[-1]))}")

for size in range(1, cfg.num_experts + 1):
    blocks = pack_blocks(cfg, size)
    platform = SimPlatform(InProcessRuntime(cfg, blocks))
    register_blocks(platform, blocks)
    orch = Orchestrator(OrchestratorConfig(cfg, blocks), platform)
    logits = orch.remote_forward(ids)
    same = np.array_equal(logits, reference)
    print(f"B={size}: {blocks.blocks_per_layer()} blocks/layer, "
          f"invocations per layer {orch.invocations}, bit-equal={same}")
