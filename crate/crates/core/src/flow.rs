//! Linearized power flow and optimal dispatch for a single island.
//!
//! Real branch flow is modeled as `base_mva * (theta_from - theta_to) / x`;
//! losses, reactive power and voltage magnitudes are dropped, and branch MVA
//! ratings are treated as MW limits. Dispatch is a linear program over the
//! generator outputs: power balance as an equality, generator bounds, and
//! two-sided flow limits expressed through injection-to-flow sensitivities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::PowerNetwork;
use crate::simplex::{self, Constraint, LinearProgram, LpOutcome, Relation};

/// Relative tolerance on the injection balance precondition.
const BALANCE_TOL: f64 = 1e-6;

/// A self-contained view of one island, with bus-local indexing.
#[derive(Debug, Clone)]
pub struct Island {
    pub base_mva: f64,
    /// Original bus ids, defining local bus positions.
    pub bus_ids: Vec<u32>,
    /// Current real load per bus, MW (mutable during shedding).
    pub loads: Vec<f64>,
    pub generators: Vec<IslandGenerator>,
    pub branches: Vec<IslandBranch>,
}

#[derive(Debug, Clone)]
pub struct IslandGenerator {
    /// Local bus position.
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub marginal_cost: f64,
}

#[derive(Debug, Clone)]
pub struct IslandBranch {
    /// Network-level branch id.
    pub id: u32,
    pub from: usize,
    pub to: usize,
    pub reactance: f64,
    /// MW limit; 0 = unlimited.
    pub rate: f64,
}

impl Island {
    /// Builds the island spanning `bus_ids` from a network, using the
    /// network's own service flags and loads.
    pub fn from_network(net: &PowerNetwork, bus_ids: &[u32]) -> Island {
        let pos: std::collections::HashMap<u32, usize> = bus_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();
        let net_pos = net.bus_positions();
        let loads = bus_ids.iter().map(|id| net.buses[net_pos[id]].load_p).collect();
        let generators = net
            .generators
            .iter()
            .filter(|g| g.in_service && pos.contains_key(&g.bus_id))
            .map(|g| IslandGenerator {
                bus: pos[&g.bus_id],
                p_min: g.p_min,
                p_max: g.p_max,
                marginal_cost: g.marginal_cost(),
            })
            .collect();
        let branches = net
            .branches
            .iter()
            .filter(|b| {
                b.in_service && pos.contains_key(&b.from_bus) && pos.contains_key(&b.to_bus)
            })
            .map(|b| IslandBranch {
                id: b.id,
                from: pos[&b.from_bus],
                to: pos[&b.to_bus],
                reactance: b.reactance,
                rate: b.rate,
            })
            .collect();
        Island {
            base_mva: net.base_mva,
            bus_ids: bus_ids.to_vec(),
            loads,
            generators,
            branches,
        }
    }

    pub fn n_buses(&self) -> usize {
        self.bus_ids.len()
    }

    pub fn total_load(&self) -> f64 {
        self.loads.iter().sum()
    }

    pub fn total_capacity(&self) -> f64 {
        self.generators.iter().map(|g| g.p_max).sum()
    }

    fn check_connected(&self) -> Result<()> {
        let edges: Vec<(usize, usize)> = self.branches.iter().map(|b| (b.from, b.to)).collect();
        let comps = crate::netmodel::connected_components(self.n_buses(), &edges);
        if comps.len() != 1 {
            return Err(Error::topology(format!(
                "island is not connected ({} components)",
                comps.len()
            )));
        }
        Ok(())
    }
}

/// Per-bus net real power, MW (generation minus load), in island bus order.
#[derive(Debug, Clone, PartialEq)]
pub struct Injections {
    pub mw: Vec<f64>,
}

impl Injections {
    pub fn total(&self) -> f64 {
        self.mw.iter().sum()
    }
}

/// Solved linear power flow.
#[derive(Debug, Clone)]
pub struct FlowSnapshot {
    /// Signed MW flow per branch, from -> to, in island branch order.
    pub branch_flow: Vec<f64>,
    /// Bus voltage angle, radians, in island bus order.
    pub bus_angle: Vec<f64>,
    /// Local position of the reference bus (angle pinned to zero).
    pub reference: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DispatchStatus {
    Feasible,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct DispatchResult {
    pub status: DispatchStatus,
    /// MW output per island generator; empty when infeasible.
    pub gen_output: Vec<f64>,
    /// MW flow per island branch; empty when infeasible.
    pub branch_flow: Vec<f64>,
    /// Linearized dispatch cost; zero when infeasible.
    pub cost: f64,
}

/// Reduced susceptance matrix with the reference row/column removed, plus the
/// mapping from reduced index to local bus position.
fn reduced_laplacian(island: &Island, reference: usize) -> (DMatrix<f64>, Vec<usize>) {
    let n = island.n_buses();
    let keep: Vec<usize> = (0..n).filter(|&i| i != reference).collect();
    let back = {
        let mut m = vec![usize::MAX; n];
        for (r, &i) in keep.iter().enumerate() {
            m[i] = r;
        }
        m
    };
    let mut b = DMatrix::zeros(keep.len(), keep.len());
    for br in &island.branches {
        let y = 1.0 / br.reactance;
        let (f, t) = (br.from, br.to);
        if f != reference && t != reference {
            let (rf, rt) = (back[f], back[t]);
            b[(rf, rf)] += y;
            b[(rt, rt)] += y;
            b[(rf, rt)] -= y;
            b[(rt, rf)] -= y;
        } else if f != reference {
            b[(back[f], back[f])] += y;
        } else if t != reference {
            b[(back[t], back[t])] += y;
        }
    }
    (b, keep)
}

/// Solves the linearized power flow `B * theta = p` with the reference angle
/// pinned to zero.
///
/// Preconditions: the island is connected, injections sum to zero within
/// `1e-6` of the total load (the caller balances any residual at the
/// reference bus), and all reactances are nonzero.
pub fn dc_power_flow(
    island: &Island,
    injections: &Injections,
    reference: usize,
) -> Result<FlowSnapshot> {
    let n = island.n_buses();
    if injections.mw.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: injections.mw.len(),
        });
    }
    if reference >= n {
        return Err(Error::topology("reference bus outside island"));
    }
    let scale = island.total_load().abs().max(1.0);
    if injections.total().abs() > BALANCE_TOL * scale {
        return Err(Error::config(format!(
            "injections are unbalanced by {} MW",
            injections.total()
        )));
    }
    island.check_connected()?;

    let (b, keep) = reduced_laplacian(island, reference);
    let p = DVector::from_iterator(
        keep.len(),
        keep.iter().map(|&i| injections.mw[i] / island.base_mva),
    );
    let theta_red = b
        .lu()
        .solve(&p)
        .ok_or_else(|| Error::topology("singular susceptance matrix"))?;
    if theta_red.iter().any(|v| !v.is_finite()) {
        return Err(Error::topology("singular susceptance matrix"));
    }

    let mut bus_angle = vec![0.0; n];
    for (r, &i) in keep.iter().enumerate() {
        bus_angle[i] = theta_red[r];
    }
    let branch_flow = island
        .branches
        .iter()
        .map(|br| island.base_mva * (bus_angle[br.from] - bus_angle[br.to]) / br.reactance)
        .collect();
    Ok(FlowSnapshot {
        branch_flow,
        bus_angle,
        reference,
    })
}

/// MW-flow sensitivity of every branch to a unit MW injection at every bus
/// (withdrawn at the reference). Row per branch, column per bus; reference
/// column is zero.
pub fn injection_sensitivity(island: &Island, reference: usize) -> Result<DMatrix<f64>> {
    island.check_connected()?;
    let n = island.n_buses();
    let (b, keep) = reduced_laplacian(island, reference);
    let inv = b
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::topology("singular susceptance matrix"))?;
    let mut back = vec![usize::MAX; n];
    for (r, &i) in keep.iter().enumerate() {
        back[i] = r;
    }
    let mut ptdf = DMatrix::zeros(island.branches.len(), n);
    for (l, br) in island.branches.iter().enumerate() {
        for (c, &bus) in keep.iter().enumerate() {
            let tf = if br.from == reference { 0.0 } else { inv[(back[br.from], c)] };
            let tt = if br.to == reference { 0.0 } else { inv[(back[br.to], c)] };
            // base_mva cancels: angles scale with p/base, flows with base/x
            ptdf[(l, bus)] = (tf - tt) / br.reactance;
        }
    }
    Ok(ptdf)
}

/// Minimum-cost dispatch meeting the island load subject to generator bounds
/// and branch MW limits. Returns `Infeasible` (rather than an error) when no
/// dispatch satisfies the constraints; that outcome drives load shedding in
/// the cascade model.
pub fn dc_opf(island: &Island, reference: usize) -> Result<DispatchResult> {
    if island.generators.is_empty() {
        return Err(Error::config(
            "island has no generators; the caller must route the no-supply case",
        ));
    }
    let ng = island.generators.len();
    let total_load = island.total_load();

    let mut constraints = vec![Constraint {
        coeffs: vec![1.0; ng],
        relation: Relation::Eq,
        rhs: total_load,
    }];

    let limited: Vec<usize> = island
        .branches
        .iter()
        .enumerate()
        .filter(|(_, b)| b.rate > 0.0)
        .map(|(i, _)| i)
        .collect();
    let ptdf = if limited.is_empty() && island.branches.is_empty() {
        None
    } else {
        Some(injection_sensitivity(island, reference)?)
    };
    if let Some(ptdf) = &ptdf {
        for &l in &limited {
            let branch = &island.branches[l];
            // flow = sum_g ptdf[l, bus(g)] * p_g - sum_b ptdf[l, b] * load_b
            let gen_coeffs: Vec<f64> = island
                .generators
                .iter()
                .map(|g| ptdf[(l, g.bus)])
                .collect();
            let load_part: f64 = (0..island.n_buses())
                .map(|b| ptdf[(l, b)] * island.loads[b])
                .sum();
            constraints.push(Constraint {
                coeffs: gen_coeffs.clone(),
                relation: Relation::Le,
                rhs: branch.rate + load_part,
            });
            constraints.push(Constraint {
                coeffs: gen_coeffs.iter().map(|c| -c).collect(),
                relation: Relation::Le,
                rhs: branch.rate - load_part,
            });
        }
    }

    let lp = LinearProgram {
        objective: island.generators.iter().map(|g| g.marginal_cost).collect(),
        constraints,
        bounds: island.generators.iter().map(|g| (g.p_min, g.p_max)).collect(),
    };
    match simplex::solve(&lp)? {
        LpOutcome::Optimal { x, objective } => {
            let branch_flow = match &ptdf {
                Some(ptdf) => {
                    let mut inj = vec![0.0; island.n_buses()];
                    for (g, &p) in island.generators.iter().zip(&x) {
                        inj[g.bus] += p;
                    }
                    for (b, load) in inj.iter_mut().zip(&island.loads) {
                        *b -= load;
                    }
                    (0..island.branches.len())
                        .map(|l| (0..island.n_buses()).map(|b| ptdf[(l, b)] * inj[b]).sum())
                        .collect()
                }
                None => Vec::new(),
            };
            Ok(DispatchResult {
                status: DispatchStatus::Feasible,
                gen_output: x,
                branch_flow,
                cost: objective,
            })
        }
        LpOutcome::Infeasible => Ok(DispatchResult {
            status: DispatchStatus::Infeasible,
            gen_output: Vec::new(),
            branch_flow: Vec::new(),
            cost: 0.0,
        }),
        LpOutcome::Unbounded => Err(Error::config("dispatch LP unbounded")),
    }
}

/// Sets every generator to `p_min + alpha * (p_max - p_min)` with one shared
/// `alpha` chosen so that generation matches `min(total load, total
/// capacity)`. Returns the per-bus injections and the unmet deficit
/// (positive when capacity falls short of load); the caller balances the
/// deficit at the reference bus.
pub fn proportional_dispatch(island: &Island) -> (Injections, f64) {
    let total_load = island.total_load();
    let cap_min: f64 = island.generators.iter().map(|g| g.p_min).sum();
    let cap_max: f64 = island.generators.iter().map(|g| g.p_max).sum();
    let target = total_load.min(cap_max);
    let alpha = if cap_max > cap_min {
        ((target - cap_min) / (cap_max - cap_min)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut mw: Vec<f64> = island.loads.iter().map(|l| -l).collect();
    for g in &island.generators {
        mw[g.bus] += g.p_min + alpha * (g.p_max - g.p_min);
    }
    let deficit = total_load - target;
    (Injections { mw }, deficit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_bus() -> Island {
        Island {
            base_mva: 100.0,
            bus_ids: vec![1, 2],
            loads: vec![0.0, 100.0],
            generators: vec![IslandGenerator {
                bus: 0,
                p_min: 0.0,
                p_max: 150.0,
                marginal_cost: 1.0,
            }],
            branches: vec![IslandBranch {
                id: 0,
                from: 0,
                to: 1,
                reactance: 0.1,
                rate: 0.0,
            }],
        }
    }

    pub(crate) fn triangle(rate: f64) -> Island {
        Island {
            base_mva: 100.0,
            bus_ids: vec![1, 2, 3],
            loads: vec![0.0, 0.0, 90.0],
            generators: vec![IslandGenerator {
                bus: 0,
                p_min: 0.0,
                p_max: 200.0,
                marginal_cost: 1.0,
            }],
            branches: vec![
                IslandBranch { id: 0, from: 0, to: 1, reactance: 0.2, rate },
                IslandBranch { id: 1, from: 1, to: 2, reactance: 0.2, rate },
                IslandBranch { id: 2, from: 0, to: 2, reactance: 0.2, rate },
            ],
        }
    }

    #[test]
    fn single_path_carries_the_whole_transfer() {
        let island = two_bus();
        let inj = Injections { mw: vec![100.0, -100.0] };
        let snap = dc_power_flow(&island, &inj, 0).unwrap();
        assert_relative_eq!(snap.branch_flow[0], 100.0, epsilon = 1e-9);
        assert_eq!(snap.bus_angle[0], 0.0);
    }

    #[test]
    fn triangle_splits_inverse_to_path_reactance() {
        // +90 at bus 1, -90 at bus 3: the direct branch is half the
        // reactance of the two-hop path, so it carries 60 of the 90 MW.
        let island = triangle(0.0);
        let inj = Injections { mw: vec![90.0, 0.0, -90.0] };
        let snap = dc_power_flow(&island, &inj, 0).unwrap();
        assert_relative_eq!(snap.branch_flow[2], 60.0, epsilon = 1e-9);
        assert_relative_eq!(snap.branch_flow[0], 30.0, epsilon = 1e-9);
        assert_relative_eq!(snap.branch_flow[1], 30.0, epsilon = 1e-9);
    }

    #[test]
    fn zero_injections_zero_flows() {
        let island = triangle(0.0);
        let inj = Injections { mw: vec![0.0; 3] };
        let snap = dc_power_flow(&island, &inj, 1).unwrap();
        assert!(snap.branch_flow.iter().all(|f| f.abs() < 1e-12));
        assert!(snap.bus_angle.iter().all(|a| a.abs() < 1e-12));
    }

    #[test]
    fn disconnected_island_is_a_topology_error() {
        let mut island = two_bus();
        island.branches.clear();
        let inj = Injections { mw: vec![100.0, -100.0] };
        assert!(matches!(
            dc_power_flow(&island, &inj, 0),
            Err(Error::Topology(_))
        ));
    }

    #[test]
    fn unbalanced_injections_rejected() {
        let island = two_bus();
        let inj = Injections { mw: vec![100.0, -40.0] };
        assert!(dc_power_flow(&island, &inj, 0).is_err());
    }

    #[test]
    fn conservation_holds_per_bus() {
        let island = triangle(0.0);
        let inj = Injections { mw: vec![50.0, 40.0, -90.0] };
        let snap = dc_power_flow(&island, &inj, 2).unwrap();
        let mut net = vec![0.0; 3];
        for (br, f) in island.branches.iter().zip(&snap.branch_flow) {
            net[br.from] += f;
            net[br.to] -= f;
        }
        for (a, b) in net.iter().zip(&inj.mw) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn reactance_scaling_leaves_flows_unchanged() {
        let island = triangle(0.0);
        let inj = Injections { mw: vec![90.0, 0.0, -90.0] };
        let f1 = dc_power_flow(&island, &inj, 0).unwrap().branch_flow;
        let mut scaled = island.clone();
        for b in &mut scaled.branches {
            b.reactance *= 7.5;
        }
        let f2 = dc_power_flow(&scaled, &inj, 0).unwrap().branch_flow;
        for (a, b) in f1.iter().zip(&f2) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn opf_single_bus_island() {
        let island = Island {
            base_mva: 100.0,
            bus_ids: vec![7],
            loads: vec![60.0],
            generators: vec![IslandGenerator {
                bus: 0,
                p_min: 0.0,
                p_max: 100.0,
                marginal_cost: 1.0,
            }],
            branches: vec![],
        };
        let d = dc_opf(&island, 0).unwrap();
        assert_eq!(d.status, DispatchStatus::Feasible);
        assert_relative_eq!(d.gen_output[0], 60.0, epsilon = 1e-9);
    }

    #[test]
    fn opf_infeasible_when_only_path_is_overloaded() {
        let mut island = two_bus();
        island.loads[1] = 80.0;
        island.branches[0].rate = 50.0;
        let d = dc_opf(&island, 0).unwrap();
        assert_eq!(d.status, DispatchStatus::Infeasible);
    }

    #[test]
    fn opf_merit_order() {
        let mut island = two_bus();
        island.loads[1] = 120.0;
        island.generators = vec![
            IslandGenerator { bus: 0, p_min: 0.0, p_max: 100.0, marginal_cost: 1.0 },
            IslandGenerator { bus: 1, p_min: 0.0, p_max: 100.0, marginal_cost: 2.0 },
        ];
        let d = dc_opf(&island, 0).unwrap();
        assert_eq!(d.status, DispatchStatus::Feasible);
        assert_relative_eq!(d.gen_output[0], 100.0, epsilon = 1e-6);
        assert_relative_eq!(d.gen_output[1], 20.0, epsilon = 1e-6);
        assert_relative_eq!(d.cost, 140.0, epsilon = 1e-6);
    }

    #[test]
    fn opf_respects_binding_flow_limit() {
        // generation at bus 1 limited to 40 MW across the single line, the
        // rest must come from the local unit at bus 2
        let mut island = two_bus();
        island.loads[1] = 80.0;
        island.branches[0].rate = 40.0;
        island.generators = vec![
            IslandGenerator { bus: 0, p_min: 0.0, p_max: 150.0, marginal_cost: 1.0 },
            IslandGenerator { bus: 1, p_min: 0.0, p_max: 150.0, marginal_cost: 5.0 },
        ];
        let d = dc_opf(&island, 0).unwrap();
        assert_eq!(d.status, DispatchStatus::Feasible);
        assert_relative_eq!(d.gen_output[0], 40.0, epsilon = 1e-6);
        assert_relative_eq!(d.gen_output[1], 40.0, epsilon = 1e-6);
        assert_relative_eq!(d.branch_flow[0], 40.0, epsilon = 1e-6);
    }

    #[test]
    fn opf_feasibility_is_monotone_in_rates() {
        let mut island = triangle(35.0);
        island.loads = vec![0.0, 30.0, 60.0];
        let tight = dc_opf(&island, 0).unwrap();
        if tight.status == DispatchStatus::Feasible {
            let mut relaxed = island.clone();
            for b in &mut relaxed.branches {
                b.rate *= 2.0;
            }
            assert_eq!(dc_opf(&relaxed, 0).unwrap().status, DispatchStatus::Feasible);
        }
    }

    #[test]
    fn opf_without_generators_is_a_config_error() {
        let mut island = two_bus();
        island.generators.clear();
        assert!(dc_opf(&island, 0).is_err());
    }

    #[test]
    fn proportional_dispatch_examples() {
        let mut island = two_bus();
        island.loads = vec![0.0, 60.0];
        let (inj, deficit) = proportional_dispatch(&island);
        assert_relative_eq!(inj.mw[0], 60.0, epsilon = 1e-12);
        assert_relative_eq!(deficit, 0.0);

        // two gens [0, 100] each, load 150 -> alpha 0.75
        island.loads = vec![0.0, 150.0];
        island.generators = vec![
            IslandGenerator { bus: 0, p_min: 0.0, p_max: 100.0, marginal_cost: 1.0 },
            IslandGenerator { bus: 1, p_min: 0.0, p_max: 100.0, marginal_cost: 1.0 },
        ];
        let (inj, deficit) = proportional_dispatch(&island);
        assert_relative_eq!(inj.mw[0], 75.0);
        assert_relative_eq!(inj.mw[1], 75.0 - 150.0);
        assert_relative_eq!(deficit, 0.0);

        // capacity 100 against load 150: maxed out, 50 MW short
        island.generators = vec![IslandGenerator {
            bus: 0,
            p_min: 0.0,
            p_max: 100.0,
            marginal_cost: 1.0,
        }];
        let (inj, deficit) = proportional_dispatch(&island);
        assert_relative_eq!(inj.mw[0], 100.0);
        assert_relative_eq!(deficit, 50.0);
    }
}
