//! JSONL traces: a header line, then one record per block per step.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scheduler::{
    activation_bits, adapt_prune_rate, prune_draw, prune_probability, redundancy_metric,
    refresh_interval, Action, ThresholdConfig, Trace, TraceHeader, TraceRecord, FLOAT_MAC_WIDTH,
};

pub fn write_trace(trace: &Trace, out: &mut impl Write) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, &trace.header)?;
    out.write_all(b"\n")?;
    for r in &trace.records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn export_trace(trace: &Trace, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Parses and validates a trace; errors carry the 1-based line number.
pub fn read_trace(input: impl BufRead) -> Result<Trace> {
    let mut lines = input.lines().enumerate();
    let err = |line: usize, message: String| Error::Trace { line, message };
    let header: TraceHeader = match lines.next() {
        None => return Err(err(1, "empty trace".into())),
        Some((_, line)) => {
            let line = line.map_err(|e| err(1, e.to_string()))?;
            serde_json::from_str(&line).map_err(|e| err(1, format!("bad header: {e}")))?
        }
    };
    header
        .thresholds
        .validate()
        .map_err(|e| err(1, e.to_string()))?;
    let per_step = header.layers + 1;
    let mut records = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        let line = line.map_err(|e| err(n, e.to_string()))?;
        if line.trim().is_empty() {
            return Err(err(n, "blank line".into()));
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| err(n, e.to_string()))?;
        rec.check(header.layers).map_err(|m| err(n, m))?;
        let k = records.len();
        let (want_t, want_layer) = (header.timesteps.checked_sub(1 + k / per_step), k % per_step);
        if want_t != Some(rec.t) || want_layer != rec.layer {
            return Err(err(
                n,
                format!(
                    "expected t={want_t:?} layer={want_layer}, got t={} layer={}",
                    rec.t, rec.layer
                ),
            ));
        }
        records.push(rec);
    }
    if records.len() != per_step * header.timesteps {
        return Err(err(
            records.len() + 2,
            format!(
                "trace ends after {} of {} records",
                records.len(),
                per_step * header.timesteps
            ),
        ));
    }
    Ok(Trace { header, records })
}

pub fn import_trace(path: &Path) -> Result<Trace> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace(BufReader::new(file))
}

/// Outcome of re-deriving every logged decision from the logged measurements.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayReport {
    pub records: usize,
    pub mismatches: Vec<String>,
}

impl ReplayReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Cache bookkeeping reconstructed from the trace alone.
#[derive(Clone, Copy)]
struct Entry {
    step: usize,
    tau: usize,
}

/// Replays a trace through the piecewise rules.
///
/// The replay keeps its own cache state, most recent divergences and prune
/// draws, and feeds the logged `D`, `S` and `V` back through the policy
/// functions; every action, interval, probability, bit-width and MAC count
/// must come out as logged.
pub fn replay_trace(trace: &Trace) -> ReplayReport {
    let h = &trace.header;
    let cfg: &ThresholdConfig = &h.thresholds;
    let mut report = ReplayReport::default();
    let mut cache: Vec<Option<Entry>> = vec![None; h.layers];
    let mut latest_d: Vec<Option<f64>> = vec![None; h.layers];

    for step in trace.records.chunks(h.layers + 1) {
        let t = step[0].t;
        let protected = t + 1 == h.timesteps || t == 0;
        let mut bad = |layer: usize, what: &str, want: String, got: String| {
            if want != got {
                report.mismatches.push(format!(
                    "t={t} layer={layer}: {what} replayed {want}, logged {got}"
                ));
            }
        };

        let variation = step[0].variation;
        let p_base = variation.map_or(cfg.p_base, |v| adapt_prune_rate(v, cfg));
        let prune_cfg = ThresholdConfig {
            p_base,
            ..cfg.clone()
        };
        let carried_d = latest_d.clone();
        let mut post_skip = false;
        for (l, rec) in step[..h.layers].iter().enumerate() {
            bad(
                l,
                "V",
                format!("{variation:?}"),
                format!("{:?}", rec.variation),
            );
            let age = cache[l].map(|e| e.step - t);
            let tau = cache[l].map(|e| e.tau);
            bad(l, "age", format!("{age:?}"), format!("{:?}", rec.age));
            bad(l, "tau", format!("{tau:?}"), format!("{:?}", rec.tau));

            let live = matches!((age, tau), (Some(a), Some(k)) if a < k);
            let reuse = h.toggles.hlc && !protected && live;
            let mut action = if reuse {
                Action::Reuse
            } else {
                Action::Recompute
            };
            let mut p_prune = None;
            let mut draw = None;
            if !reuse {
                if let (Some(a), Some(k)) = (age, tau) {
                    if h.toggles.hlc && k == cfg.tau_max && cfg.tau_max > 1 && a == k {
                        post_skip = true;
                    }
                }
                if h.toggles.srap && !protected && l > 0 {
                    let p = rec
                        .similarity
                        .map_or(0.0, |s| prune_probability(s, &prune_cfg));
                    let u = prune_draw(h.prune_seed, t, l);
                    p_prune = Some(p);
                    draw = Some(u);
                    if u < p {
                        action = Action::Prune;
                    }
                }
            }
            bad(
                l,
                "action",
                format!("{action:?}"),
                format!("{:?}", rec.action),
            );
            bad(
                l,
                "p_prune",
                format!("{p_prune:?}"),
                format!("{:?}", rec.p_prune),
            );
            bad(l, "draw", format!("{draw:?}"), format!("{:?}", rec.draw));

            let macs = if action == Action::Recompute {
                h.block_macs
            } else {
                0
            };
            bad(l, "macs", macs.to_string(), rec.macs.to_string());
            if action == Action::Recompute && rec.bits.is_none() && rec.weight_bits.is_none() {
                bad(
                    l,
                    "bit_macs",
                    (macs * FLOAT_MAC_WIDTH).to_string(),
                    rec.bit_macs.to_string(),
                );
            }

            if action == Action::Recompute {
                // D exists exactly when there was an entry to compare against
                bad(
                    l,
                    "D present",
                    cache[l].is_some().to_string(),
                    rec.divergence.is_some().to_string(),
                );
                let new_tau = rec
                    .divergence
                    .map_or(cfg.tau_min, |d| refresh_interval(d, cfg));
                bad(
                    l,
                    "new_tau",
                    format!("{:?}", Some(new_tau)),
                    format!("{:?}", rec.new_tau),
                );
                cache[l] = Some(Entry {
                    step: t,
                    tau: new_tau,
                });
                if rec.divergence.is_some() {
                    latest_d[l] = rec.divergence;
                }
            } else {
                bad(l, "new_tau", "None".into(), format!("{:?}", rec.new_tau));
            }
        }

        // bit-width is planned before this step's divergences land, so it
        // is checked against the state carried in from the previous step
        let bits = if !h.toggles.aigq_acts {
            None
        } else if protected || post_skip {
            Some(cfg.bit_max)
        } else {
            let scaled: Vec<f64> = carried_d
                .iter()
                .flatten()
                .map(|d| d / cfg.divergence_scale)
                .collect();
            if scaled.is_empty() {
                Some(cfg.bit_max)
            } else {
                redundancy_metric(&scaled)
                    .ok()
                    .map(|r| activation_bits(r, cfg))
            }
        };
        for (l, rec) in step[..h.layers].iter().enumerate() {
            bad(l, "bits", format!("{bits:?}"), format!("{:?}", rec.bits));
        }
        let head = &step[h.layers];
        bad(
            h.layers,
            "head macs",
            h.head_macs.to_string(),
            head.macs.to_string(),
        );
        report.records += step.len();
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_a_line_one_error() {
        let e = read_trace(&b""[..]).unwrap_err();
        assert!(matches!(e, Error::Trace { line: 1, .. }));
    }
}
