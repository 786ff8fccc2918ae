"""Mirror descent on the linear-quadratic point mass.

With known linear dynamics, an affine policy and the exact S-step, each
iteration is a KL-constrained improvement followed by an exact projection,
so the global policy's expected cost never goes up. This script prints the
cost after every iteration together with the step size each condition used.

    python3 demos/lq_mirror_descent.py
"""
from mdgps.envs import make_env
from mdgps.mdgps import MDGPSConfig, MDGPSState, global_policy_cost, run_iteration


def main(iterations=10):
    spec = make_env("pointmass_lq")
    cfg = MDGPSConfig(policy_arch="affine", s_step="exact", dynamics="exact", kl_tol=1e-3)
    state = MDGPSState.initial(spec, cfg)

    def cost():
        return sum(global_policy_cost(spec, state.policy, i) for i in range(spec.n_conditions))

    print(f"iter  global cost   step sizes")
    print(f"   0  {cost():11.3f}")
    for _ in range(iterations):
        state, rec = run_iteration(state)
        eps = " ".join(f"{c.epsilon:.3g}" for c in rec.conditions)
        print(f"{rec.iteration:4d}  {cost():11.3f}   {eps}")


if __name__ == "__main__":
    main()
