"""
Needle-in-a-haystack instances
==============================

Each instance hides KEY=value; needles in a passage of lowercase filler, then
asks for one of them.  Two-needle instances repeat the key and ask for the
first or second occurrence, so the model must track position as well as
content.  The answer slots at the end are [MASK] tokens.
"""

from aveyb import Rng
from aveyb import evalbench as eb
from aveyb.tokenizer import MASK_ID, ByteTokenizer

tok = ByteTokenizer()
rng = Rng(5, "demo")

single = eb.generate_niah(160, "single", "alphanumeric", rng.child("one"))
print("single needle, answer", single.answer)
text = tok.decode(single.ids)
print("   ...", text[-60:], "+", int((single.ids == MASK_ID).sum()), "[MASK] slots")

double = eb.generate_niah(200, "two_needle", "numeric", rng.child("two"))
print(f"two needles, asking for occurrence {double.ordinal}, answer {double.answer}")
print("  needles found by scanning:", eb.locate_needles(double))

# a 40/60 single/two-needle mix, written as JSON lines
data = eb.generate_niah_dataset(10, 512, "numeric", rng.child("set"))
print("modes in a 10-instance set:", [inst.mode for inst in data])
