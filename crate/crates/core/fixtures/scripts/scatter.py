import matplotlib.pyplot as plt
import numpy as np

rng = np.random.default_rng(7)
x = rng.normal(size=200)
y = 0.6 * x + rng.normal(scale=0.5, size=200)
z = x * y

plt.figure(figsize=(5, 5))
plt.scatter(x, y, c=z, cmap='jet', s=12)
plt.colorbar()
plt.title('Correlation')
