"""
Average precision
=================

All-point interpolated AP at IoU 0.5 on a hand-built example: two ground
truth boxes and three detections, the middle one a false positive.
"""
from dayolo.evaluation import ScoredBox, average_precision
from dayolo.model import BoxAnnotation

gts = [[BoxAnnotation(0, 0.25, 0.25, 0.2, 0.2), BoxAnnotation(0, 0.75, 0.75, 0.2, 0.2)]]
dets = [[ScoredBox(0, 0.9, (0.25, 0.25, 0.2, 0.2)),
         ScoredBox(0, 0.8, (0.50, 0.10, 0.1, 0.1)),
         ScoredBox(0, 0.7, (0.75, 0.75, 0.2, 0.2))]]
res = average_precision(dets, gts)
recall, precision = res.curves[0]
for s, r, p in zip((0.9, 0.8, 0.7), recall, precision):
    print(f"score >= {s}: recall {r:.2f} precision {p:.3f}")
print(f"AP = {res.per_class[0]:.4f}  (0.5 * 1 + 0.5 * 2/3)")

# The matching is order independent: shuffling detections changes nothing.
shuffled = [dets[0][::-1]]
print("shuffled AP:", average_precision(shuffled, gts).per_class[0])
