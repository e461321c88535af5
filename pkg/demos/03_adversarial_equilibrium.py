"""
Adversarial training reaching its fixed point
=============================================

The saddle-point objective used for sequence regularization is easiest
to watch on a one-dimensional problem: an affine generator tries to
turn unit noise into samples from N(2, 0.25) while a small network
tries to tell the two apart.  At the fixed point the discriminator is
reduced to guessing (probabilities near one half on both populations)
and the generator's output mean lands on the real mean.
"""

from avfp.training import train_toy_gan

res = train_toy_gan(steps=5000, seed=0)

print(f"generator: scale {res.gen_scale:+.3f}, shift {res.gen_shift:+.3f}")
print(f"fake sample mean      : {res.fake_mean:.3f}  (real mean 2.0)")
print(f"discriminator on real : {res.d_real_mean:.3f}")
print(f"discriminator on fake : {res.d_fake_mean:.3f}")

# the trace logs (step, discriminator-on-real, discriminator-on-fake);
# watch both probabilities collapse toward 0.5 as training proceeds
print("\n  step   D(real)  D(fake)")
for step, d_real, d_fake in res.trace[:: max(1, len(res.trace) // 10)]:
    print(f"{step:6d}   {d_real:.3f}    {d_fake:.3f}")

assert 0.4 <= res.d_real_mean <= 0.6 and 0.4 <= res.d_fake_mean <= 0.6
assert abs(res.fake_mean - 2.0) <= 0.2
print("\nequilibrium reached: discriminator at chance, mean matched")
