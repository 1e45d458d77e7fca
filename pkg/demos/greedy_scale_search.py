"""
Choosing segment scales greedily
================================

Scale selection screens each candidate scale alongside the document and
token representations, keeps the ones scoring above the screening mean
(best first) and then tries growing prefixes of that list. Here the
evaluator is a lookup table, so the whole trace is visible at once; the
``msaes search-scales`` command plugs real cross-validated training in
instead.
"""

from msaes.trainer import greedy_scale_search, parse_scales

table = {(): 0.75, (10,): 0.70, (30,): 0.80, (50,): 0.78, (70,): 0.60, (30, 50): 0.83}

state = greedy_scale_search(parse_scales("10:70:20"), lambda combo: table[combo])

print(f"screening mean {state.qwk_ave:.3f}; candidates best-first {state.candidates}")
for combo, q in state.trace:
    print(f"  doc+tok{''.join(f'+{k}' for k in combo):10s} dev QWK {q:.2f}")
print("selected:", state.to_dict()["selected"])
