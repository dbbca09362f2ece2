"""Tour of the Fourier machinery behind the prompt transforms.

Walks from the quadratic-time transform definition to the fast
power-of-two path, then to the real-part 2D transform applied to prompt
blocks, checking the identities the training code relies on.
"""

import numpy as np

from vfpt import ComplexBuffer, Tensor, backward, dft_naive, fft, fourier2d_real, ifft
from vfpt import tensor as T
from vfpt.spectral import real_dft2

rng = np.random.default_rng(0)

print("== 1. the reference transform on hand inputs ==")
delta = dft_naive(ComplexBuffer.from_real([1.0, 0.0, 0.0, 0.0]))
print("delta spectrum (flat):", delta.re)
constant = dft_naive(ComplexBuffer.from_real([0.5, 0.5, 0.5, 0.5]))
print("constant concentrates at bin 0:", constant.re)

print("\n== 2. fast path agrees with the reference ==")
for n in (8, 13, 64):
    buf = ComplexBuffer(rng.standard_normal(n), rng.standard_normal(n))
    fast, slow = fft(buf), dft_naive(buf)
    err = max(np.abs(fast.re - slow.re).max(), np.abs(fast.im - slow.im).max())
    roundtrip = ifft(fast)
    inv = np.abs(roundtrip.re - buf.re).max()
    print(f"  n={n:3d}: |fft - reference| = {err:.2e}, |ifft(fft(x)) - x| = {inv:.2e}")

print("\n== 3. the prompt transform: real part of the 2D spectrum ==")
block = rng.uniform(-1, 1, (10, 64))  # a prompt block: 10 tokens, width 64
transformed = real_dft2(block)
print("input block norm ", np.linalg.norm(block).round(3))
print("output block norm", np.linalg.norm(transformed).round(3),
      "(unnormalized transform grows magnitudes)")
both_orders = np.abs(real_dft2(block, hidden_first=False) - transformed).max()
print("axis order does not matter:", both_orders)

print("\n== 4. the backward pass is the exact adjoint ==")
p = Tensor(rng.uniform(-1, 1, (6, 16)), requires_grad=True)
g = rng.uniform(-1, 1, (6, 16))
out = fourier2d_real(p)
backward(T.tsum(T.mul(out, Tensor(g))))
lhs = float((g * out.data).sum())
rhs = float((p.grad * p.data).sum())
print(f"<G, A(P)> = {lhs:.12f}")
print(f"<A'(G), P> = {rhs:.12f}")
print(f"gap = {abs(lhs - rhs):.2e}")
