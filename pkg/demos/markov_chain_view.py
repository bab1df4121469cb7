"""Treat a forward policy as a Markov chain by gluing the sink back onto the
source, then look at stationarity, the GFNMC criterion, periods and the
spectrum of the alpha-mixed chain.

Run:  python demos/markov_chain_view.py
"""
import numpy as np

from alphagfn import mc
from alphagfn.envs import SetGenSpec, build_setgen
from alphagfn.oracle import env_oracle

env = build_setgen(SetGenSpec(vocab_size=4, set_capacity=2), seed=0)
flows, pf, _ = env_oracle(env)
P, mg = mc.forward_kernel(env.graph, pf)
b = mc.analyze_chain(P, mg.merged_root, alphas=(0.3, 0.5, 0.7), mg=mg)

print("merged chain:", P.shape[0], "states")
print("stationary pi proportional to the flows:",
      np.allclose(b.pi / b.pi[mg.merged_root], flows.flow[:-1] / flows.z))
print("GFNMC criterion holds:", b.criterion.is_gfnmc,
      f"(max residual {b.criterion.max_residual:.1e})")
print("period of P:", b.period, " periods of P_alpha:", b.period_mixed)
print("second largest modulus, P:", round(b.beta, 6),
      " P_alpha:", {a: round(v, 6) for a, v in b.beta_mixed.items()})

# an inner loop breaks the criterion
inner = np.array([[0.0, 1.0], [0.5, 0.5]])
pi = mc.stationary(inner)
rep = mc.gfnmc_criterion(inner, pi, mc.fundamental_matrix(inner, pi), 0)
print("two-state chain with a self loop: residuals", np.round(rep.residuals, 6), "->", rep.is_gfnmc)
