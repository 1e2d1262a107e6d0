import matplotlib.pyplot as plt
import numpy as np

months = np.arange(1, 13)
temperature = [3, 4, 8, 12, 17, 21, 24, 23, 19, 13, 7, 4]
rainfall = [60, 48, 50, 45, 52, 40, 35, 42, 55, 70, 75, 68]

plt.figure(figsize=(7, 4))
plt.plot(months, temperature, marker='o', label='Temperature')
plt.plot(months, rainfall, marker='s', label='Rainfall')
plt.legend()
plt.xlabel('Month')
