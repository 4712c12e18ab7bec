"""Tour of the closed-form simplex geometry.

Walks through the coordinate charts, the log-partition potential and its
derivatives, the Fisher-Rao metric, the convexity-bound matrix with its
uniform spectral bounds, and the isometric sphere embedding.
"""
import numpy as np

from sigmaflow import simplex as sg

rng = np.random.default_rng(0)

print("== charts and potentials ==")
p = sg.softmax(rng.standard_normal(5))
theta = sg.to_theta(p)
print("p            :", np.round(p, 4))
print("theta(p)     :", np.round(theta, 4))
print("to_prob(theta) roundtrip error:", np.max(np.abs(sg.to_prob(theta) - p)))
print("psi(theta)   :", sg.log_partition(theta))
print("neg entropy  :", sg.neg_entropy(p), "(Legendre:", sg.neg_entropy_theta(theta), ")")

print("\n== Fisher-Rao metric as Hessian of psi ==")
g = sg.fisher_metric(theta)
print("g(theta) =\n", np.round(g, 5))
print("eigenvalues:", np.round(np.linalg.eigvalsh(g), 6))

print("\n== tangent parametrization ==")
v = sg.softmax_inv(p)
print("softmax_inv(p) :", np.round(v, 4), " (sums to", v.sum(), ")")
print("theta <-> tangent roundtrip:",
      np.max(np.abs(sg.tangent_to_theta(sg.theta_to_tangent(theta)) - theta)))

print("\n== convexity-bound matrix: uniform spectral bounds ==")
for c in (2, 4, 8):
    th = rng.uniform(-20, 20, size=(20000, c - 1))
    w = np.linalg.eigvalsh(sg.b_matrix(th))
    print(f"c={c}: spectrum in [{w.min():+.4f}, {w.max():+.4f}]  "
          f"bounds [{sg.b_lower(c):+.4f}, {sg.b_upper(c):+.4f}]")

print("\n== sphere map: isometry onto the radius-2 orthant ==")
p = sg.softmax(rng.standard_normal(4))
w = rng.standard_normal(3)
lhs = w @ sg.fisher_metric(sg.to_theta(p)) @ w
rhs = np.sum((sg.sphere_map_jacobian(p) @ w) ** 2)
print(f"|Lambda(p)| = {np.linalg.norm(sg.sphere_map(p)):.12f}")
print(f"metric norm {lhs:.10f} vs pushforward norm {rhs:.10f}")
