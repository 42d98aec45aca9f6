//! MATPOWER case-file importer.
//!
//! Reads the `mpc.baseMVA`, `mpc.bus`, `mpc.gen`, `mpc.branch` and optional
//! `mpc.gencost` blocks of a MATPOWER v7 case file. Only the columns the
//! linearized engine consumes are interpreted; positions follow the MATPOWER
//! documentation. Branch rows with `BR_STATUS = 0` are dropped so that branch
//! ids (assigned in file order) index exactly the vulnerable components.
//! Generators keep their status as an `in_service` flag. A missing `gencost`
//! block defaults every generator to a 1 $/MWh linear cost.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::netmodel::{Branch, Bus, Generator, PowerNetwork};

/// One whitespace-separated numeric token with its source position.
#[derive(Debug, Clone, Copy)]
struct Token {
    value: f64,
    line: usize,
    column: usize,
}

struct Row {
    tokens: Vec<Token>,
    line: usize,
}

impl Row {
    fn need(&self, idx: usize, what: &str) -> Result<Token> {
        self.tokens.get(idx).copied().ok_or_else(|| {
            Error::parse(
                self.line,
                self.tokens.last().map_or(1, |t| t.column),
                format!("row too short: missing column {} ({what})", idx + 1),
            )
        })
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(i) => &line[..i],
        None => line,
    }
}

/// Whitespace-splits `s`, yielding each token with its byte offset.
fn split_with_offsets(s: &str) -> impl Iterator<Item = (usize, &str)> {
    s.split_whitespace()
        .scan(0usize, move |searched_to, tok| {
            let off = s[*searched_to..].find(tok).unwrap() + *searched_to;
            *searched_to = off + tok.len();
            Some((off, tok))
        })
}

fn parse_rows(lines: &[&str], start: usize, name: &str) -> Result<(Vec<Row>, usize)> {
    let mut rows = Vec::new();
    let mut i = start;
    while i < lines.len() {
        let raw = strip_comment(lines[i]);
        let closing = raw.find("];");
        let content = match closing {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        // a physical line can hold several ';'-separated rows
        let mut cursor = 0usize;
        for piece in content.split(';') {
            let mut tokens = Vec::new();
            for (off, tok) in split_with_offsets(piece) {
                let value: f64 = tok.parse().map_err(|_| {
                    Error::parse(
                        i + 1,
                        cursor + off + 1,
                        format!("invalid number `{tok}` in mpc.{name}"),
                    )
                })?;
                tokens.push(Token {
                    value,
                    line: i + 1,
                    column: cursor + off + 1,
                });
            }
            cursor += piece.len() + 1;
            if !tokens.is_empty() {
                rows.push(Row { tokens, line: i + 1 });
            }
        }
        if closing.is_some() {
            return Ok((rows, i + 1));
        }
        i += 1;
    }
    Err(Error::parse(
        start,
        1,
        format!("block mpc.{name} is not terminated by `];`"),
    ))
}

fn find_block(lines: &[&str], name: &str) -> Option<usize> {
    let needle = format!("mpc.{name}");
    lines.iter().position(|l| {
        let l = strip_comment(l);
        if let Some(pos) = l.find(&needle) {
            // must be an assignment of a matrix, not a mention in text
            l[pos + needle.len()..].trim_start().starts_with('=')
        } else {
            false
        }
    })
}

fn block_rows(lines: &[&str], name: &str, required: bool) -> Result<Option<Vec<Row>>> {
    let Some(at) = find_block(lines, name) else {
        if required {
            return Err(Error::parse(1, 1, format!("mpc.{name} block not found")));
        }
        return Ok(None);
    };
    // Content may begin on the same line after '['.
    let line = strip_comment(lines[at]);
    let bracket = line.find('[').ok_or_else(|| {
        Error::parse(at + 1, 1, format!("mpc.{name} assignment is not a matrix"))
    })?;
    let mut owned_lines: Vec<&str> = Vec::new();
    let tail = &line[bracket + 1..];
    owned_lines.push(tail);
    owned_lines.extend(&lines[at + 1..]);
    // Re-run the row scanner against the tail slice, fixing up line numbers.
    let (mut rows, _) = parse_rows(&owned_lines, 0, name)?;
    for row in &mut rows {
        let shift = at; // owned_lines[0] is physical line at+1
        row.line += shift;
        for t in &mut row.tokens {
            t.line += shift;
        }
    }
    Ok(Some(rows))
}

fn parse_base_mva(lines: &[&str]) -> Result<f64> {
    for (i, raw) in lines.iter().enumerate() {
        let l = strip_comment(raw);
        if let Some(pos) = l.find("mpc.baseMVA") {
            let rest = &l[pos + "mpc.baseMVA".len()..];
            let rest = rest.trim_start();
            let Some(rest) = rest.strip_prefix('=') else {
                continue;
            };
            let num = rest.trim().trim_end_matches(';').trim();
            return num.parse().map_err(|_| {
                Error::parse(i + 1, pos + 1, format!("invalid baseMVA value `{num}`"))
            });
        }
    }
    Err(Error::parse(1, 1, "mpc.baseMVA not found"))
}

/// Parses a MATPOWER case file into a [`PowerNetwork`].
pub fn parse_matpower_case(text: &str) -> Result<PowerNetwork> {
    let lines: Vec<&str> = text.lines().collect();
    let base_mva = parse_base_mva(&lines)?;

    let bus_rows = block_rows(&lines, "bus", true)?.unwrap();
    let gen_rows = block_rows(&lines, "gen", true)?.unwrap();
    let branch_rows = block_rows(&lines, "branch", true)?.unwrap();
    let gencost_rows = block_rows(&lines, "gencost", false)?;

    let mut buses = Vec::with_capacity(bus_rows.len());
    let mut seen = BTreeSet::new();
    for row in &bus_rows {
        let id_tok = row.need(0, "BUS_I")?;
        let id = id_tok.value as u32;
        if !seen.insert(id) {
            return Err(Error::parse(
                id_tok.line,
                id_tok.column,
                format!("duplicate bus id {id}"),
            ));
        }
        let bus_type = row.need(1, "BUS_TYPE")?.value as i64;
        buses.push(Bus {
            id,
            load_p: row.need(2, "PD")?.value,
            load_q: row.need(3, "QD")?.value,
            is_reference_candidate: bus_type == 3,
        });
    }

    let mut generators = Vec::with_capacity(gen_rows.len());
    for row in &gen_rows {
        let bus_tok = row.need(0, "GEN_BUS")?;
        let bus_id = bus_tok.value as u32;
        if !seen.contains(&bus_id) {
            return Err(Error::parse(
                bus_tok.line,
                bus_tok.column,
                format!("generator references unknown bus {bus_id}"),
            ));
        }
        let status = row.need(7, "GEN_STATUS")?.value != 0.0;
        generators.push(Generator {
            bus_id,
            p_min: row.need(9, "PMIN")?.value,
            p_max: row.need(8, "PMAX")?.value,
            cost_coeffs: [0.0, 1.0, 0.0],
            in_service: status,
        });
    }

    if let Some(rows) = gencost_rows {
        let ng = generators.len();
        if rows.len() != ng && rows.len() != 2 * ng {
            return Err(Error::parse(
                rows.first().map_or(1, |r| r.line),
                1,
                format!(
                    "mpc.gencost has {} rows for {ng} generators (expected {ng} or {})",
                    rows.len(),
                    2 * ng
                ),
            ));
        }
        // with 2*ng rows the first ng are the real-power costs
        for (gen, row) in generators.iter_mut().zip(rows.iter()) {
            let model_tok = row.need(0, "MODEL")?;
            if model_tok.value as i64 != 2 {
                return Err(Error::parse(
                    model_tok.line,
                    model_tok.column,
                    "only polynomial gencost (MODEL = 2) is supported",
                ));
            }
            let ncost_tok = row.need(3, "NCOST")?;
            let ncost = ncost_tok.value as usize;
            if ncost > 3 {
                return Err(Error::parse(
                    ncost_tok.line,
                    ncost_tok.column,
                    "polynomial cost degree above quadratic is not supported",
                ));
            }
            // coefficients are listed highest order first
            let mut coeffs = [0.0f64; 3];
            for k in 0..ncost {
                let tok = row.need(4 + k, "COST")?;
                coeffs[ncost - 1 - k] = tok.value;
            }
            gen.cost_coeffs = coeffs;
        }
    }

    let mut branches = Vec::new();
    for row in &branch_rows {
        let status = row.need(10, "BR_STATUS")?.value != 0.0;
        if !status {
            // out-of-service rows are not vulnerable components
            continue;
        }
        let f_tok = row.need(0, "F_BUS")?;
        let t_tok = row.need(1, "T_BUS")?;
        let (from_bus, to_bus) = (f_tok.value as u32, t_tok.value as u32);
        if !seen.contains(&from_bus) {
            return Err(Error::parse(
                f_tok.line,
                f_tok.column,
                format!("branch references unknown bus {from_bus}"),
            ));
        }
        if !seen.contains(&to_bus) {
            return Err(Error::parse(
                t_tok.line,
                t_tok.column,
                format!("branch references unknown bus {to_bus}"),
            ));
        }
        let x_tok = row.need(3, "BR_X")?;
        if x_tok.value == 0.0 {
            return Err(Error::parse(
                x_tok.line,
                x_tok.column,
                "in-service branch has zero reactance",
            ));
        }
        branches.push(Branch {
            id: branches.len() as u32,
            from_bus,
            to_bus,
            reactance: x_tok.value,
            resistance: row.need(2, "BR_R")?.value,
            rate: row.need(5, "RATE_A")?.value,
            in_service: true,
            charging_b: row.need(4, "BR_B")?.value,
            tap_ratio: row.need(8, "TAP")?.value,
            phase_shift: row.need(9, "SHIFT")?.value,
        });
    }

    let net = PowerNetwork {
        base_mva,
        buses,
        generators,
        branches,
    };
    net.validate().map_err(|e| match e {
        Error::Config(msg) => Error::parse(1, 1, msg),
        other => other,
    })?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const THREE_BUS: &str = "\
function mpc = case3
mpc.version = '2';
mpc.baseMVA = 100;
%% bus data
mpc.bus = [
    1 3 0    0   0 0 1 1 0 135 1 1.05 0.95;
    2 1 60.0 10  0 0 1 1 0 135 1 1.05 0.95;
    3 1 40.0 5   0 0 1 1 0 135 1 1.05 0.95;
];
mpc.gen = [
    1 0 0 100 -100 1 100 1 150 0;
];
mpc.branch = [
    1 2 0.01 0.10 0 80 0 0 0 0 1 -360 360;
    1 3 0.01 0.10 0 80 0 0 0 0 1 -360 360;
    2 3 0.01 0.10 0 80 0 0 0 0 1 -360 360;
];
mpc.gencost = [
    2 0 0 3 0.02 2.0 0;
];
";

    #[test]
    fn parses_counts_and_fields() {
        let net = parse_matpower_case(THREE_BUS).unwrap();
        assert_eq!(net.buses.len(), 3);
        assert_eq!(net.branches.len(), 3);
        assert_eq!(net.generators.len(), 1);
        assert_eq!(net.base_mva, 100.0);
        assert!(net.buses[0].is_reference_candidate);
        assert_eq!(net.buses[1].load_p, 60.0);
        assert_eq!(net.generators[0].p_max, 150.0);
        assert_eq!(net.generators[0].cost_coeffs, [0.0, 2.0, 0.02]);
        assert_eq!(net.branches[2].from_bus, 2);
        assert_eq!(net.branches[2].rate, 80.0);
    }

    #[test]
    fn missing_base_mva_is_an_error() {
        let text = THREE_BUS.replace("mpc.baseMVA = 100;", "");
        let err = parse_matpower_case(&text).unwrap_err();
        assert!(err.to_string().contains("baseMVA"), "{err}");
    }

    #[test]
    fn duplicate_bus_id_error_names_the_row() {
        let text = THREE_BUS.replace(
            "2 1 60.0 10  0 0 1 1 0 135 1 1.05 0.95;",
            "1 1 60.0 10  0 0 1 1 0 135 1 1.05 0.95;",
        );
        let err = parse_matpower_case(&text).unwrap_err();
        match err {
            // the duplicated id is reported on its own row
            Error::Parse { line, .. } => assert_eq!(line, 7),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn zero_reactance_rejected() {
        let text = THREE_BUS.replace(
            "2 3 0.01 0.10 0 80 0 0 0 0 1 -360 360;",
            "2 3 0.01 0.00 0 80 0 0 0 0 1 -360 360;",
        );
        let err = parse_matpower_case(&text).unwrap_err();
        assert!(err.to_string().contains("zero reactance"), "{err}");
    }

    #[test]
    fn unknown_bus_reference_rejected() {
        let text = THREE_BUS.replace(
            "2 3 0.01 0.10 0 80 0 0 0 0 1 -360 360;",
            "2 9 0.01 0.10 0 80 0 0 0 0 1 -360 360;",
        );
        let err = parse_matpower_case(&text).unwrap_err();
        assert!(err.to_string().contains("unknown bus 9"), "{err}");
    }

    #[test]
    fn status_zero_branches_are_dropped_from_the_index() {
        let text = THREE_BUS.replace(
            "1 3 0.01 0.10 0 80 0 0 0 0 1 -360 360;",
            "1 3 0.01 0.10 0 80 0 0 0 0 0 -360 360;",
        );
        let net = parse_matpower_case(&text).unwrap();
        assert_eq!(net.branches.len(), 2);
        // ids re-assigned contiguously in file order
        assert_eq!(net.branches[1].from_bus, 2);
        assert_eq!(net.branches[1].id, 1);
    }

    #[test]
    fn missing_gencost_defaults_to_unit_linear_cost() {
        let text = THREE_BUS
            .replace("mpc.gencost = [", "% mpc.gencost = [")
            .replace("    2 0 0 3 0.02 2.0 0;", "%");
        let net = parse_matpower_case(&text).unwrap();
        assert_eq!(net.generators[0].cost_coeffs, [0.0, 1.0, 0.0]);
    }
}
