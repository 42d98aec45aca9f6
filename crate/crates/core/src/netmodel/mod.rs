//! Network data model and topology queries.
//!
//! A [`PowerNetwork`] is the static description of a grid: buses with real
//! and reactive load, generators with dispatch ranges and polynomial costs,
//! and branches with reactances and MW ratings. Branch ids are assigned in
//! file order, are contiguous from zero, and double as the index into the
//! component-state vector used by the samplers: branch `i` fails exactly when
//! bit `i` of a state vector is set. Rows that are out of service in the
//! source file are dropped at parse time so that the id space covers only the
//! vulnerable components.
//!
//! The canonical on-disk format is JSON mirroring these types one-to-one;
//! MATPOWER case files are supported as an import format (see [`matpower`]).

mod matpower;

pub use matpower::parse_matpower_case;

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::limitstate::ComponentStateVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: u32,
    /// Real power demand, MW.
    pub load_p: f64,
    /// Reactive power demand, MVar. Stored for completeness; the linearized
    /// flow engine never reads it.
    pub load_q: f64,
    pub is_reference_candidate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus_id: u32,
    pub p_min: f64,
    pub p_max: f64,
    /// Polynomial cost coefficients `[constant, linear, quadratic]` in $/MWh
    /// terms.
    pub cost_coeffs: [f64; 3],
    pub in_service: bool,
}

impl Generator {
    /// Marginal cost of the linearized dispatch objective, evaluated at the
    /// midpoint of the dispatch range.
    pub fn marginal_cost(&self) -> f64 {
        self.cost_coeffs[1] + self.cost_coeffs[2] * (self.p_min + self.p_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    /// Contiguous id in `0..n_l`; doubles as the component-state index.
    pub id: u32,
    pub from_bus: u32,
    pub to_bus: u32,
    /// Series reactance, p.u.
    pub reactance: f64,
    /// Series resistance, p.u. Stored, unused by the linearized engine.
    pub resistance: f64,
    /// MW flow limit; 0 means unlimited.
    pub rate: f64,
    pub in_service: bool,
    /// Total line charging susceptance, p.u. Parsed and kept so an AC engine
    /// could use it; ignored here.
    #[serde(default)]
    pub charging_b: f64,
    /// Transformer tap ratio (0 = none). Kept, ignored by the linear engine.
    #[serde(default)]
    pub tap_ratio: f64,
    /// Transformer phase shift, degrees. Kept, ignored by the linear engine.
    #[serde(default)]
    pub phase_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerNetwork {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub generators: Vec<Generator>,
    pub branches: Vec<Branch>,
}

impl PowerNetwork {
    /// Number of vulnerable components, i.e. the random-variable dimension.
    pub fn n_vulnerable(&self) -> usize {
        self.branches.len()
    }

    pub fn total_load(&self) -> f64 {
        self.buses.iter().map(|b| b.load_p).sum()
    }

    /// Map from bus id to position in `buses`.
    pub fn bus_positions(&self) -> HashMap<u32, usize> {
        self.buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id, i))
            .collect()
    }

    /// Checks the structural invariants; run after construction or import.
    pub fn validate(&self) -> Result<()> {
        if self.buses.is_empty() {
            return Err(Error::config("network has no buses"));
        }
        if self.generators.is_empty() {
            return Err(Error::config("network has no generators"));
        }
        if !(self.base_mva > 0.0) {
            return Err(Error::config("base_mva must be positive"));
        }
        let mut seen = BTreeSet::new();
        for b in &self.buses {
            if !seen.insert(b.id) {
                return Err(Error::config(format!("duplicate bus id {}", b.id)));
            }
            if b.load_p < 0.0 {
                return Err(Error::config(format!("bus {} has negative load", b.id)));
            }
        }
        for g in &self.generators {
            if !seen.contains(&g.bus_id) {
                return Err(Error::config(format!(
                    "generator references unknown bus {}",
                    g.bus_id
                )));
            }
            if g.p_min > g.p_max {
                return Err(Error::config(format!(
                    "generator at bus {} has p_min > p_max",
                    g.bus_id
                )));
            }
        }
        for (i, br) in self.branches.iter().enumerate() {
            if br.id as usize != i {
                return Err(Error::config(format!(
                    "branch ids must be contiguous in order; position {i} holds id {}",
                    br.id
                )));
            }
            if br.from_bus == br.to_bus {
                return Err(Error::config(format!("branch {} is a self-loop", br.id)));
            }
            if !seen.contains(&br.from_bus) || !seen.contains(&br.to_bus) {
                return Err(Error::config(format!(
                    "branch {} references an unknown bus",
                    br.id
                )));
            }
            if br.in_service && br.reactance == 0.0 {
                return Err(Error::config(format!(
                    "in-service branch {} has zero reactance",
                    br.id
                )));
            }
        }
        Ok(())
    }

    /// Returns a copy with branch `i` taken out of service wherever
    /// `x[i] = 1`. Buses and generators are untouched.
    pub fn apply_state(&self, x: &ComponentStateVector) -> Result<PowerNetwork> {
        if x.len() != self.branches.len() {
            return Err(Error::Dimension {
                expected: self.branches.len(),
                got: x.len(),
            });
        }
        let mut net = self.clone();
        for (i, br) in net.branches.iter_mut().enumerate() {
            if x.get(i) {
                br.in_service = false;
            }
        }
        Ok(net)
    }

    /// Connected components of the graph induced by in-service branches.
    ///
    /// Every bus belongs to exactly one island; isolated buses are singleton
    /// islands. Islands are sorted by their smallest bus id and bus ids are
    /// sorted within each island.
    pub fn islands(&self) -> Vec<Vec<u32>> {
        let pos = self.bus_positions();
        let edges: Vec<(usize, usize)> = self
            .branches
            .iter()
            .filter(|b| b.in_service)
            .map(|b| (pos[&b.from_bus], pos[&b.to_bus]))
            .collect();
        connected_components(self.buses.len(), &edges)
            .into_iter()
            .map(|comp| {
                let mut ids: Vec<u32> = comp.into_iter().map(|i| self.buses[i].id).collect();
                ids.sort_unstable();
                ids
            })
            .collect()
    }

    /// All buses within `radius` hops (over in-service branches) of either
    /// endpoint of the given branch. `radius = 0` returns the two endpoints.
    pub fn neighborhood(&self, branch_id: u32, radius: usize) -> Result<BTreeSet<u32>> {
        let branch = self
            .branches
            .get(branch_id as usize)
            .ok_or_else(|| Error::topology(format!("unknown branch {branch_id}")))?;
        let pos = self.bus_positions();
        let mut adj = vec![Vec::new(); self.buses.len()];
        for b in self.branches.iter().filter(|b| b.in_service) {
            let (f, t) = (pos[&b.from_bus], pos[&b.to_bus]);
            adj[f].push(t);
            adj[t].push(f);
        }
        let seeds = [pos[&branch.from_bus], pos[&branch.to_bus]];
        let reached = multi_source_bfs(&adj, &seeds, radius);
        Ok(reached.into_iter().map(|i| self.buses[i].id).collect())
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_canonical_json(text: &str) -> Result<PowerNetwork> {
        let net: PowerNetwork = serde_json::from_str(text)?;
        net.validate()?;
        Ok(net)
    }
}

/// Connected components over `n` vertices, as sorted vertex-index lists,
/// ordered by smallest member.
pub(crate) fn connected_components(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut comp = vec![usize::MAX; n];
    let mut out: Vec<Vec<usize>> = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut members = vec![start];
        comp[start] = id;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if comp[w] == usize::MAX {
                    comp[w] = id;
                    members.push(w);
                    queue.push_back(w);
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

/// Vertices within `radius` hops of any seed (seeds are at distance 0).
pub(crate) fn multi_source_bfs(
    adj: &[Vec<usize>],
    seeds: &[usize],
    radius: usize,
) -> BTreeSet<usize> {
    let mut dist: HashMap<usize, usize> = HashMap::new();
    let mut queue = VecDeque::new();
    for &s in seeds {
        dist.insert(s, 0);
        queue.push_back(s);
    }
    while let Some(v) = queue.pop_front() {
        let d = dist[&v];
        if d == radius {
            continue;
        }
        for &w in &adj[v] {
            if !dist.contains_key(&w) {
                dist.insert(w, d + 1);
                queue.push_back(w);
            }
        }
    }
    dist.into_keys().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::limitstate::ComponentStateVector;

    /// Path network a-b-c-d with unit data; branch i connects bus i+1 and i+2.
    pub(crate) fn path_network(n: u32) -> PowerNetwork {
        let buses = (1..=n)
            .map(|id| Bus {
                id,
                load_p: if id == 1 { 0.0 } else { 10.0 },
                load_q: 0.0,
                is_reference_candidate: id == 1,
            })
            .collect();
        let branches = (0..n - 1)
            .map(|i| Branch {
                id: i,
                from_bus: i + 1,
                to_bus: i + 2,
                reactance: 0.1,
                resistance: 0.01,
                rate: 0.0,
                in_service: true,
                charging_b: 0.0,
                tap_ratio: 0.0,
                phase_shift: 0.0,
            })
            .collect();
        PowerNetwork {
            base_mva: 100.0,
            buses,
            generators: vec![Generator {
                bus_id: 1,
                p_min: 0.0,
                p_max: 100.0,
                cost_coeffs: [0.0, 1.0, 0.0],
                in_service: true,
            }],
            branches,
        }
    }

    #[test]
    fn apply_state_identity_and_full_failure() {
        let net = path_network(4);
        let zeros = ComponentStateVector::zeros(3);
        assert_eq!(net.apply_state(&zeros).unwrap(), net);

        let ones = ComponentStateVector::from_bits(vec![true; 3]);
        let dead = net.apply_state(&ones).unwrap();
        assert!(dead.branches.iter().all(|b| !b.in_service));
    }

    #[test]
    fn apply_state_length_mismatch() {
        let net = path_network(3);
        let err = net.apply_state(&ComponentStateVector::zeros(5)).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 2, got: 5 }));
    }

    #[test]
    fn islands_of_connected_and_split_paths() {
        let net = path_network(4);
        assert_eq!(net.islands(), vec![vec![1, 2, 3, 4]]);

        // fail the middle branch b-c
        let x = ComponentStateVector::from_bits(vec![false, true, false]);
        let split = net.apply_state(&x).unwrap();
        assert_eq!(split.islands(), vec![vec![1, 2], vec![3, 4]]);

        let all = net
            .apply_state(&ComponentStateVector::from_bits(vec![true; 3]))
            .unwrap();
        assert_eq!(all.islands().len(), 4);
    }

    #[test]
    fn neighborhood_radius_zero_and_one() {
        let net = path_network(4);
        // branch 1 connects buses 2 and 3
        let r0 = net.neighborhood(1, 0).unwrap();
        assert_eq!(r0.into_iter().collect::<Vec<_>>(), vec![2, 3]);
        let r1 = net.neighborhood(1, 1).unwrap();
        assert_eq!(r1.into_iter().collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn neighborhood_on_star() {
        // 5-bus star: center bus 1, leaves 2..5; branch 0 is center-leaf 2.
        let buses = (1..=5)
            .map(|id| Bus {
                id,
                load_p: 0.0,
                load_q: 0.0,
                is_reference_candidate: id == 1,
            })
            .collect();
        let branches = (0..4)
            .map(|i| Branch {
                id: i,
                from_bus: 1,
                to_bus: i + 2,
                reactance: 0.1,
                resistance: 0.0,
                rate: 0.0,
                in_service: true,
                charging_b: 0.0,
                tap_ratio: 0.0,
                phase_shift: 0.0,
            })
            .collect();
        let net = PowerNetwork {
            base_mva: 100.0,
            buses,
            generators: vec![Generator {
                bus_id: 1,
                p_min: 0.0,
                p_max: 1.0,
                cost_coeffs: [0.0, 1.0, 0.0],
                in_service: true,
            }],
            branches,
        };
        // R=1 around center-leaf branch (1,2): center, that leaf, and every
        // other leaf adjacent to the center.
        let got = net.neighborhood(0, 1).unwrap();
        assert_eq!(got.into_iter().collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
        let err = net.neighborhood(99, 1).unwrap_err();
        assert!(matches!(err, Error::Topology(_)));
    }

    #[test]
    fn canonical_json_round_trip() {
        let net = path_network(4);
        let json = net.to_canonical_json().unwrap();
        let back = PowerNetwork::from_canonical_json(&json).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn validate_rejects_bad_networks() {
        let mut net = path_network(3);
        net.branches[0].reactance = 0.0;
        assert!(net.validate().is_err());

        let mut net = path_network(3);
        net.buses[1].id = 1;
        assert!(net.validate().is_err());

        let mut net = path_network(3);
        net.generators[0].bus_id = 77;
        assert!(net.validate().is_err());
    }
}
