import matplotlib.pyplot as plt

categories = ['2019', '2020', '2021', '2022', '2023']
sales = [23, 31, 28, 40, 46]
returns = [5, 7, 6, 9, 8]

fig, ax = plt.subplots(figsize=(6, 4))
ax.bar(categories, sales, color='red')
ax.bar(categories, returns, color='green')
ax.grid(True)
