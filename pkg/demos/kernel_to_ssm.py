"""
Turning a squared-exponential kernel into a Markov state-space model.

Run with ``python demos/kernel_to_ssm.py``.  Prints how well the implied lag
covariances match the kernel for a few orders, then compares posterior means
from exact GP regression and from the Kalman smoother on one regression task.
"""
import numpy as np

from adm.convert import kernel_to_markovian, lag_covariances
from adm.gp_oracle import gp_predict, make_task, ssm_predict
from adm.kernels import SE, eval_block

# %% lag covariances of the companion system vs the kernel itself
kern = SE(1.0, 5.0)
lags = np.arange(16.0)
exact = np.array([np.asarray(eval_block(kern, tau)).reshape(-1)[0] for tau in lags])
print("order  max |K_ssm(tau) - K(tau)|, tau = 0..15")
for order in (1, 2, 4, 8):
    comp = kernel_to_markovian(kern, order)
    approx = lag_covariances(comp, len(lags) - 1)[:, 0, 0]
    print(f"{order:5d}  {np.max(np.abs(approx - exact)):.2e}")

# %% regression: 300 points, 60% used for training
task = make_task("SE", seed=0)
g = gp_predict(task)
print("\ntest MSE   exact GP        SSM")
for order in (1, 2, 4, 8):
    s = ssm_predict(task, order)
    print(f"P={order}       {np.mean((g - task.test_y) ** 2):.4f}     {np.mean((s - task.test_y) ** 2):.4f}")
