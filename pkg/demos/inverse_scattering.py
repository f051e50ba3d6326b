"""Recover a 15-mode potential from 100 smoothed interior receivers by Gauss-Newton.

Starts from the three lowest modes of the truth and prints the residual
history.  Takes about a minute.
"""
import numpy as np

from hps.frechet import gauss_newton, history_csv, make_inverse_problem, warm_start

ip = make_inverse_problem(gamma=5, k=20, p=16, L=3)
theta, hist = gauss_newton(ip, warm_start(ip, 3), max_iters=25)
print(history_csv(hist, f"k={ip.k} N_theta={ip.basis.N_theta}"))
print("relative coefficient error",
      np.linalg.norm(theta - ip.theta_star) / np.linalg.norm(ip.theta_star))
