//! Reader for MATPOWER version-2 case text (`mpc.bus`, `mpc.gen`, `mpc.branch`).

use std::collections::HashMap;

use num_complex::Complex64;

use super::{BranchRecord, BusId, BusKind, BusRecord, NetworkCase};
use crate::error::{Error, Result};

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn parse_scalar(text: &str, key: &str) -> Option<f64> {
    for line in text.lines() {
        let line = strip_comment(line).trim();
        if let Some(rest) = line.strip_prefix(key) {
            let rest = rest.trim_start();
            if let Some(v) = rest.strip_prefix('=') {
                return v.trim().trim_end_matches(';').trim().parse().ok();
            }
        }
    }
    None
}

fn parse_matrix(text: &str, key: &str) -> Result<Vec<Vec<f64>>> {
    let start = text
        .lines()
        .position(|l| {
            let l = strip_comment(l).trim();
            l.starts_with(key) && l[key.len()..].trim_start().starts_with('=')
        })
        .ok_or_else(|| Error::Parse(format!("missing `{key}` block")))?;
    let mut rows = Vec::new();
    let mut body = String::new();
    for line in text.lines().skip(start) {
        body.push_str(strip_comment(line));
        body.push('\n');
        if strip_comment(line).contains(']') {
            break;
        }
    }
    let open = body
        .find('[')
        .ok_or_else(|| Error::Parse(format!("`{key}` has no '['")))?;
    let close = body
        .rfind(']')
        .ok_or_else(|| Error::Parse(format!("`{key}` is not closed")))?;
    for row in body[open + 1..close].split([';', '\n']) {
        let vals: Vec<&str> = row
            .split([' ', '\t', ','])
            .filter(|s| !s.is_empty())
            .collect();
        if vals.is_empty() {
            continue;
        }
        let parsed = vals
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad number `{v}` in {key}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(parsed);
    }
    Ok(rows)
}

fn need(row: &[f64], cols: usize, what: &str) -> Result<()> {
    if row.len() < cols {
        Err(Error::Parse(format!(
            "{what} row has {} columns, need {cols}",
            row.len()
        )))
    } else {
        Ok(())
    }
}

/// Parses MATPOWER case text. Off-nominal transformer taps are taken at 1.0
/// (logged); phase shifters are rejected.
pub fn parse_matpower(text: &str) -> Result<NetworkCase> {
    let base = parse_scalar(text, "mpc.baseMVA").unwrap_or(100.0);
    let name = text
        .lines()
        .find_map(|l| l.trim().strip_prefix("function mpc ="))
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "matpower".into());

    let bus_rows = parse_matrix(text, "mpc.bus")?;
    let gen_rows = parse_matrix(text, "mpc.gen")?;
    let branch_rows = parse_matrix(text, "mpc.branch")?;

    // bus -> (sum Pg, sum Qg, Vg of first in-service unit)
    let mut gens: HashMap<u32, (f64, f64, f64)> = HashMap::new();
    for g in &gen_rows {
        need(g, 8, "gen")?;
        if g[7] <= 0.0 {
            continue;
        }
        let e = gens.entry(g[0] as u32).or_insert((0.0, 0.0, g[5]));
        e.0 += g[1];
        e.1 += g[2];
    }

    let mut buses = Vec::with_capacity(bus_rows.len());
    for r in &bus_rows {
        need(r, 13, "bus")?;
        let id = r[0] as u32;
        let (pg, qg, vg) = gens.get(&id).copied().unwrap_or((0.0, 0.0, r[7]));
        let kind = match r[1] as i64 {
            3 => BusKind::Slack,
            2 if gens.contains_key(&id) => BusKind::Pv,
            1 | 2 => BusKind::Pq,
            t => return Err(Error::Parse(format!("bus {id} has unsupported type {t}"))),
        };
        buses.push(BusRecord {
            id: BusId(id),
            kind,
            p_inj: (pg - r[2]) / base,
            q_inj: (qg - r[3]) / base,
            shunt_admittance: Complex64::new(r[4] / base, r[5] / base),
            v_setpoint: match kind {
                BusKind::Pq => None,
                _ => Some(vg),
            },
            p_load: r[2] / base,
            q_load: r[3] / base,
        });
    }

    let mut branches = Vec::with_capacity(branch_rows.len());
    let mut taps_ignored = 0;
    for (k, r) in branch_rows.iter().enumerate() {
        need(r, 11, "branch")?;
        if r[9] != 0.0 {
            return Err(Error::Parse(format!(
                "branch {} has a phase shift, which is not modelled",
                k + 1
            )));
        }
        if r[8] != 0.0 && r[8] != 1.0 {
            taps_ignored += 1;
        }
        let mut br = BranchRecord::new(
            (k + 1) as u32,
            r[0] as u32,
            r[1] as u32,
            Complex64::new(r[2], r[3]),
        )
        .with_charging(r[4]);
        br.in_service = r[10] > 0.0;
        branches.push(br);
    }
    if taps_ignored > 0 {
        log::warn!("{name}: {taps_ignored} off-nominal transformer taps taken at 1.0");
    }
    NetworkCase::with_base(name, base, buses, branches)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = "function mpc = tiny
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
  1 3 0 0 0 0 1 1.0 0 138 1 1.1 0.9;
  2 1 50 10 0 5 1 1.0 0 138 1 1.1 0.9; % load bus
];
mpc.gen = [
  1 60 0 100 -100 1.02 100 1 100 0;
];
mpc.branch = [
  1 2 0.01 0.1 0.02 0 0 0 0 0 1 -360 360;
];
";

    #[test]
    fn parses_tiny_case() {
        let case = parse_matpower(TINY).unwrap();
        assert_eq!(case.name(), "tiny");
        assert_eq!(case.n_buses(), 2);
        let b2 = case.bus(BusId(2)).unwrap();
        assert!((b2.p_inj + 0.5).abs() < 1e-15);
        assert!((b2.q_inj + 0.1).abs() < 1e-15);
        assert!((b2.shunt_admittance.im - 0.05).abs() < 1e-15);
        assert_eq!(case.bus(BusId(1)).unwrap().v_setpoint, Some(1.02));
        assert_eq!(case.branches()[0].shunt_susceptance_total, 0.02);
    }

    #[test]
    fn missing_block_is_parse_error() {
        let text = TINY.replace("mpc.gen", "mpc.xgen");
        assert!(matches!(parse_matpower(&text), Err(Error::Parse(_))));
    }
}
