# %% [markdown]
# # Segmentation metrics
#
# Everything is derived from one confusion matrix accumulated over all
# pixels.  Classes that never occur in either mask are undefined and left
# out of the means.

# %%
import numpy as np

from cubeseg.metrics import confusion, report

truth = np.array([[0, 0, 1, 1],
                  [0, 0, 1, 1],
                  [0, 2, 2, 1],
                  [0, 2, 2, 2]])
pred = np.array([[0, 0, 1, 1],
                 [0, 1, 1, 1],
                 [0, 2, 1, 1],
                 [0, 0, 2, 2]])
cm = confusion(pred, truth, 4)
print(cm.counts)
rep = report(cm, ["background", "foundation", "walls", "roof"])
print(rep.render_table())

# %% [markdown]
# Per class, F1 and IoU carry the same information: F1 = 2 IoU / (1 + IoU).

# %%
for c in range(3):
    iou, f1 = rep.per_class_iou[c], rep.per_class_f1[c]
    print(c, round(f1, 6), round(2 * iou / (1 + iou), 6))
