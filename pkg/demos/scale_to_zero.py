"""Walk one function through its lifecycle on the simulated clock: a cold start,
warm reuse, scale-out under a burst, and retirement after the idle timeout."""
import numpy as np

from serverless_moe import ModelConfig, pack_blocks
from serverless_moe.faas import FunctionSpec, InProcessRuntime, SimPlatform
from serverless_moe.protocol import ExpertBatchRequest, ExpertWorkItem, encode_request

cfg = ModelConfig()
blocks = pack_blocks(cfg, 4)
platform = SimPlatform(InProcessRuntime(cfg, blocks), concurrency_limit=1, service_ms=50)
platform.register(FunctionSpec("exp-l0-b0", 0, 0, (0, 1, 2, 3), max_replicas=3, idle_timeout_ms=5000, cold_start_ms=200))

x = np.ones(cfg.embed_dim, np.float32)
payload = encode_request(ExpertBatchRequest(0, 0, 0, (ExpertWorkItem(0, 2, x),)))


def show(label):
    c = platform.snapshot_counters()["exp-l0-b0"]
    print(f"t={platform.now():7.0f}ms {label:<28} warm={platform.warm_replicas()} "
          f"cold_starts={c.cold_starts} peak_replicas={c.max_concurrent_replicas} invocations={c.invocations}")


show("registered")
t = platform.submit("exp-l0-b0", payload)
platform.wait([t])
show(f"first call done (+{t.completed_at - t.submitted:.0f}ms)")
platform.invoke("exp-l0-b0", payload)
show("warm call")

burst = [platform.submit("exp-l0-b0", payload) for _ in range(8)]
platform.wait(burst)
show("after a burst of 8")

platform.advance(5000)
show("5s of silence")
platform.invoke("exp-l0-b0", payload)
show("next call starts cold again")
