"""
Processor cost grows linearly with sequence length
==================================================

Compression fixes the number of rows each split hands to the processor, so the
cross-token mixing work is (N/S) * S^2.  A single split covering the whole
sequence pays N^2 instead.  Counting FLOPs over a length ladder and fitting a
power law shows both slopes.
"""

from aveyb import AveyB, ModelConfig
from aveyb import evalbench as eb

lengths = [256, 512, 1024, 2048, 4096]
model = AveyB(ModelConfig())

for mode in ("compressed", "quadratic"):
    run = eb.measure_scaling(model, lengths, batch=1, mode=mode, timed=False)
    print(mode)
    for p in run.points:
        print(f"  N={p.N:5d}  mixing {p.mixing_flops:.3e}  whole processor {p.flops:.3e}")
    print(f"  mixing exponent {run.fit('mixing_flops').exponent:.3f}, "
          f"whole processor exponent {run.fit('flops').exponent:.3f}")

# the enricher and fuser act per position, so the whole-processor slope of the
# single-split baseline sits between 1 and 2 at these lengths

# compression cuts the contextualized rows per split from (k+1)S to S
full = eb.contextualized_tokens(ModelConfig(compression_on=False), 1024)
comp = eb.contextualized_tokens(ModelConfig(), 1024)
print(f"contextualized tokens at N=1024: {full} uncompressed, {comp} compressed ({full / comp:.0f}x)")
