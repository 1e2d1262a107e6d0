import matplotlib.pyplot as plt
import numpy as np

labels = ['North', 'South', 'East', 'West']
q1 = [12, 17, 9, 14]
q2 = [15, 13, 11, 18]
x = np.arange(len(labels))
width = 0.35

fig, ax = plt.subplots()
ax.bar(x - width / 2, q1, width)
ax.bar(x + width / 2, q2, width)
ax.set_xticks(x)
ax.set_xticklabels(labels)
ax.set_ylabel('Units sold')
