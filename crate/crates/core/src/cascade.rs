//! Cascading-failure simulation.
//!
//! Given a component-state vector, the network splits into islands and each
//! island is resolved independently:
//!
//! 1. no supply (no in-service generator) -> nothing served;
//! 2. a lone supply bus -> serve `min(capacity, local load)`;
//! 3. otherwise attempt optimal dispatch with a reference bus drawn
//!    uniformly among the supply buses (seeded substream);
//! 4. on infeasible dispatch, run a proportional-dispatch power flow, shed a
//!    fixed fraction of load around the most overloaded branch, and retry —
//!    up to a configured number of rounds;
//! 5. still infeasible -> trip the most overloaded branch, re-split the
//!    island, and recurse. When no rate-limited branch is overloaded the
//!    island serves `min(capacity, current load)`.
//!
//! The outcome is the served/lost load bookkeeping for the whole network.
//! Every run is a pure function of `(network, state, seed)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{self, DispatchStatus, Island};
use crate::limitstate::ComponentStateVector;
use crate::netmodel::{connected_components, multi_source_bfs, PowerNetwork};
use crate::rng::Key;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    /// Fraction of current load shed per round at each affected bus.
    pub shed_fraction: f64,
    /// Shedding rounds before the overloaded branch is tripped.
    pub max_shed_iterations: u32,
    /// Hop radius around the overloaded branch for shedding.
    pub radius: usize,
    /// `|flow|/rate` above `1 + tolerance` counts as overloaded.
    pub overload_tolerance: f64,
    pub seed: u64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            shed_fraction: 0.05,
            max_shed_iterations: 20,
            radius: 1,
            overload_tolerance: 1e-6,
            seed: 0,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.shed_fraction > 0.0 && self.shed_fraction < 1.0) {
            return Err(Error::config("shed_fraction must lie in (0, 1)"));
        }
        if self.max_shed_iterations < 1 {
            return Err(Error::config("max_shed_iterations must be at least 1"));
        }
        if self.overload_tolerance < 0.0 {
            return Err(Error::config("overload_tolerance must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeOutcome {
    /// Pre-event total real load, MW.
    pub total_load: f64,
    pub served_load: f64,
    /// `(total - served) / total`, or 0 for a loadless network.
    pub loss_fraction: f64,
    /// Branch ids removed by overload trips, in trip order. Never contains a
    /// branch that was already failed in the input state.
    pub tripped_branches: Vec<u32>,
    pub shed_events: u32,
    pub islands_processed: u32,
}

/// Multiplies the load at each listed bus by `1 - fraction`; repeated
/// shedding compounds on the current load.
pub fn shed_loads(loads: &mut [f64], buses: &[usize], fraction: f64) {
    for &b in buses {
        loads[b] *= 1.0 - fraction;
    }
}

struct Working {
    /// Per network branch.
    in_service: Vec<bool>,
    /// Per network bus, current (possibly shed) load.
    loads: Vec<f64>,
    served: f64,
    tripped: Vec<u32>,
    shed_events: u32,
    islands_processed: u32,
    island_counter: u64,
}

/// Runs the cascade for one state vector. Deterministic for a fixed
/// `(net, x, cfg.seed)`.
pub fn run_cascade(
    net: &PowerNetwork,
    x: &ComponentStateVector,
    cfg: &CascadeConfig,
) -> Result<CascadeOutcome> {
    cfg.validate()?;
    if x.len() != net.n_vulnerable() {
        return Err(Error::Dimension {
            expected: net.n_vulnerable(),
            got: x.len(),
        });
    }

    let ref_key = Key::new(cfg.seed, "cascade-reference").with(x.digest());
    let mut work = Working {
        in_service: net
            .branches
            .iter()
            .enumerate()
            .map(|(i, b)| b.in_service && !x.get(i))
            .collect(),
        loads: net.buses.iter().map(|b| b.load_p).collect(),
        served: 0.0,
        tripped: Vec::new(),
        shed_events: 0,
        islands_processed: 0,
        island_counter: 0,
    };

    let total_load: f64 = work.loads.iter().sum();
    for island_buses in decompose(net, &work.in_service, None) {
        resolve_island(net, cfg, &mut work, ref_key, island_buses)?;
    }

    let served = work.served.min(total_load).max(0.0);
    let loss_fraction = if total_load > 0.0 {
        ((total_load - served) / total_load).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(CascadeOutcome {
        total_load,
        served_load: served,
        loss_fraction,
        tripped_branches: work.tripped,
        shed_events: work.shed_events,
        islands_processed: work.islands_processed,
    })
}

/// Splits (a subset of) the network into islands over the working service
/// flags. Returns bus-position lists ordered by smallest member.
fn decompose(
    net: &PowerNetwork,
    in_service: &[bool],
    within: Option<&[usize]>,
) -> Vec<Vec<usize>> {
    let pos = net.bus_positions();
    match within {
        None => {
            let edges: Vec<(usize, usize)> = net
                .branches
                .iter()
                .enumerate()
                .filter(|(i, _)| in_service[*i])
                .map(|(_, b)| (pos[&b.from_bus], pos[&b.to_bus]))
                .collect();
            connected_components(net.buses.len(), &edges)
        }
        Some(subset) => {
            let local: std::collections::HashMap<usize, usize> = subset
                .iter()
                .enumerate()
                .map(|(l, &g)| (g, l))
                .collect();
            let edges: Vec<(usize, usize)> = net
                .branches
                .iter()
                .enumerate()
                .filter(|(i, _)| in_service[*i])
                .filter_map(|(_, b)| {
                    let f = local.get(&pos[&b.from_bus])?;
                    let t = local.get(&pos[&b.to_bus])?;
                    Some((*f, *t))
                })
                .collect();
            connected_components(subset.len(), &edges)
                .into_iter()
                .map(|comp| comp.into_iter().map(|l| subset[l]).collect())
                .collect()
        }
    }
}

/// Builds the flow-engine view of an island from the working state.
fn island_view(net: &PowerNetwork, work: &Working, bus_positions: &[usize]) -> Island {
    let local: std::collections::HashMap<u32, usize> = bus_positions
        .iter()
        .enumerate()
        .map(|(l, &p)| (net.buses[p].id, l))
        .collect();
    Island {
        base_mva: net.base_mva,
        bus_ids: bus_positions.iter().map(|&p| net.buses[p].id).collect(),
        loads: bus_positions.iter().map(|&p| work.loads[p]).collect(),
        generators: net
            .generators
            .iter()
            .filter(|g| g.in_service && local.contains_key(&g.bus_id))
            .map(|g| flow::IslandGenerator {
                bus: local[&g.bus_id],
                p_min: g.p_min,
                p_max: g.p_max,
                marginal_cost: g.marginal_cost(),
            })
            .collect(),
        branches: net
            .branches
            .iter()
            .enumerate()
            .filter(|(i, b)| {
                work.in_service[*i]
                    && local.contains_key(&b.from_bus)
                    && local.contains_key(&b.to_bus)
            })
            .map(|(_, b)| flow::IslandBranch {
                id: b.id,
                from: local[&b.from_bus],
                to: local[&b.to_bus],
                reactance: b.reactance,
                rate: b.rate,
            })
            .collect(),
    }
}

/// Most overloaded rate-limited branch of a flow solution, as
/// `(island branch index, ratio)`; ties go to the smallest branch id.
fn most_overloaded(island: &Island, flows: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, br) in island.branches.iter().enumerate() {
        if br.rate <= 0.0 {
            continue;
        }
        let ratio = flows[i].abs() / br.rate;
        let wins = match best {
            None => true,
            Some((bi, bratio)) => {
                ratio > bratio || (ratio == bratio && br.id < island.branches[bi].id)
            }
        };
        if wins {
            best = Some((i, ratio));
        }
    }
    best
}

fn resolve_island(
    net: &PowerNetwork,
    cfg: &CascadeConfig,
    work: &mut Working,
    ref_key: Key,
    bus_positions: Vec<usize>,
) -> Result<()> {
    work.islands_processed += 1;
    work.island_counter += 1;
    let island_index = work.island_counter;

    let island = island_view(net, work, &bus_positions);
    let supply: Vec<usize> = {
        let mut s: Vec<usize> = island.generators.iter().map(|g| g.bus).collect();
        s.sort_unstable();
        s.dedup();
        s
    };

    // step 1: no supply node
    if supply.is_empty() {
        return Ok(());
    }
    // step 2: a lone supply bus
    if island.n_buses() == 1 {
        work.served += island.total_capacity().min(island.loads[0]);
        return Ok(());
    }

    // step 3: dispatch with a random supply bus as reference
    let reference = supply[ref_key.with(island_index).pick(supply.len())];

    let mut island = island;
    for round in 0..=cfg.max_shed_iterations {
        let dispatch = flow::dc_opf(&island, reference)?;
        if dispatch.status == DispatchStatus::Feasible {
            work.served += island.total_load();
            return Ok(());
        }

        // step 4: proportional dispatch, balance the deficit explicitly at
        // the reference bus, and look for overloads
        let (mut inj, deficit) = flow::proportional_dispatch(&island);
        inj.mw[reference] += deficit;
        let snapshot = flow::dc_power_flow(&island, &inj, reference)?;
        let overloaded = most_overloaded(&island, &snapshot.branch_flow)
            .filter(|&(_, ratio)| ratio > 1.0 + cfg.overload_tolerance);
        let Some((worst, _)) = overloaded else {
            // no overloaded branch left: the island is supply-limited
            work.served += island.total_capacity().min(island.total_load());
            return Ok(());
        };

        if round < cfg.max_shed_iterations {
            // shed around the overloaded branch and retry
            let branch = &island.branches[worst];
            let local_adj = {
                let mut adj = vec![Vec::new(); island.n_buses()];
                for b in &island.branches {
                    adj[b.from].push(b.to);
                    adj[b.to].push(b.from);
                }
                adj
            };
            let affected: Vec<usize> =
                multi_source_bfs(&local_adj, &[branch.from, branch.to], cfg.radius)
                    .into_iter()
                    .collect();
            shed_loads(&mut island.loads, &affected, cfg.shed_fraction);
            work.shed_events += 1;
            // mirror into the global working loads
            let pos = net.bus_positions();
            for (local, id) in island.bus_ids.iter().enumerate() {
                work.loads[pos[id]] = island.loads[local];
            }
        } else {
            // step 5: trip the worst branch and recurse into the fragments
            let branch_id = island.branches[worst].id;
            work.in_service[branch_id as usize] = false;
            work.tripped.push(branch_id);
            for fragment in decompose(net, &work.in_service, Some(&bus_positions)) {
                resolve_island(net, cfg, work, ref_key, fragment)?;
            }
            return Ok(());
        }
    }
    unreachable!("shed loop always returns");
}
