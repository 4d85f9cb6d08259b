"""Where the rank requirement breaks: standstill on the eco-driving network.

The velocity node couples the kinetic converter ``y = 0.5 m_e v^2`` to the
lethargy converter through ``v``. At ``v = 0`` the kinetic converter's
sensitivity vanishes and the node rows of ``F + G dy/du`` lose rank. The
checker samples the input boxes; as the lower velocity bound approaches
zero the smallest singular value shrinks with it, and at zero the check
fails with a standstill witness.

    python demos/rank_boundary.py
"""
from powernet import scenarios as sc
from powernet.checker import check_requirements


def main():
    veh = sc.VehicleParams()
    route = sc.synth_route(5 * veh.delta_s, delta_s=veh.delta_s)
    print(f"{'v_lo [m/s]':>11} {'v_rank':>12} {'sigma_J':>10} {'sigma_J/sigma_1':>16}  witness")
    for lo in (2.0, 0.5, 1e-1, 1e-2, 1e-4, 0.0):
        p = sc.build_eco_driving(veh, route, T_max=9.0, bounds=sc.EcoBounds(kin_input_min=lo))
        rep = check_requirements(p)
        st = rep.statuses["v_rank"]
        wit = f"u_v = {st.witness['u']['v']}" if st.witness else ""
        print(f"{lo:11.0e} {st.state:>12} {rep.rank_margin:10.2e} {rep.rank_margin_rel:16.2e}  {wit}")


if __name__ == "__main__":
    main()
