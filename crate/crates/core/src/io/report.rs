//! Result files: CSV tables and JSON-lines trial records.
//!
//! Every file starts with a provenance line. In CSV files it is a `#`
//! comment; in JSON-lines files it is an object with a `provenance` key.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{CampaignReport, TrialResult};
use crate::device::CalibrationCell;
use crate::error::FormatError;
use crate::genetic::GenerationStats;
use crate::sensitivity::SensitivityTable;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    /// SHA-256 of the configuration that produced the file.
    pub config_sha256: String,
}

impl Provenance {
    pub fn new(seed: u64, config: &[u8]) -> Self {
        let digest = Sha256::digest(config);
        Self {
            tool: "dvfault".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "# tool={} version={} seed={} config_sha256={}\n",
            self.tool, self.version, self.seed, self.config_sha256
        )
    }
}

pub fn sensitivity_csv(prov: &Provenance, table: &SensitivityTable) -> String {
    let mut out = prov.csv_line();
    let _ = writeln!(out, "# model={} scheme={}", table.fingerprint, table.scheme);
    out.push_str("layer,element,granularity,anchor_bit,S\n");
    for e in &table.entries {
        let anchor = e.target.anchor.map_or(String::new(), |b| b.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{:e}",
            e.target.addr.layer, e.target.addr.index, e.target.granularity, anchor, e.score
        );
    }
    out
}

pub fn calibration_csv(prov: &Provenance, cells: &[CalibrationCell]) -> String {
    let mut out = prov.csv_line();
    out.push_str("V_l,F_h,offset,stress,rate_no_effect,rate_fault,rate_single_bit,rate_crash,rate_noresp,mean_bits\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            c.v_l,
            c.f_h,
            c.offset,
            c.stress,
            c.rate_no_effect,
            c.rate_fault,
            c.rate_single_bit,
            c.rate_crash,
            c.rate_no_response,
            c.mean_bits
        );
    }
    out
}

#[derive(Serialize, Deserialize)]
struct ProvenanceRecord {
    provenance: Provenance,
}

pub fn trials_jsonl(prov: &Provenance, records: &[TrialResult]) -> String {
    let mut out = serde_json::to_string(&ProvenanceRecord { provenance: prov.clone() }).expect("serializable");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("serializable"));
        out.push('\n');
    }
    out
}

/// Reads trial records, skipping the provenance line.
pub fn read_trials_jsonl(text: &str) -> Result<(Option<Provenance>, Vec<TrialResult>), FormatError> {
    let mut prov = None;
    let mut records = Vec::new();
    let mut offset = 0;
    for (i, line) in text.lines().enumerate() {
        let start = offset;
        offset += line.len() + 1;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            if let Ok(p) = serde_json::from_str::<ProvenanceRecord>(line) {
                prov = Some(p.provenance);
                continue;
            }
        }
        let r = serde_json::from_str(line).map_err(|e| FormatError::Malformed {
            offset: start,
            reason: format!("line {}: {e}", i + 1),
        })?;
        records.push(r);
    }
    Ok((prov, records))
}

pub fn summary_csv(prov: &Provenance, r: &CampaignReport) -> String {
    let mut out = prov.csv_line();
    out.push_str("trials,completed,crashed,no_response,baseline_accuracy,attacked_accuracy,degradation,crash_rate,no_response_rate,total_faults,spent_faults,target_class,targeted_eligible,targeted_success_rate\n");
    let (t, e, s) = match r.targeted {
        Some(t) => (t.target.to_string(), t.eligible.to_string(), t.rate().to_string()),
        None => (String::new(), String::new(), String::new()),
    };
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.trials,
        r.completed,
        r.crashed,
        r.no_response,
        r.baseline_accuracy,
        r.attacked_accuracy,
        r.degradation(),
        r.crash_rate(),
        r.no_response_rate(),
        r.total_faults,
        r.spent_faults,
        t,
        e,
        s
    );
    out
}

/// Rows are true classes, columns predicted classes.
pub fn confusion_csv(prov: &Provenance, confusion: &[Vec<u64>]) -> String {
    let mut out = prov.csv_line();
    out.push_str("true\\predicted");
    for c in 0..confusion.len() {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for (t, row) in confusion.iter().enumerate() {
        let _ = write!(out, "{t}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn ga_trace_csv(prov: &Provenance, trace: &[GenerationStats]) -> String {
    let mut out = prov.csv_line();
    out.push_str("generation,best_fitness,mean_fitness,F_h,V_l,T_W,T_d\n");
    for g in trace {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            g.generation, g.best_fitness, g.mean_fitness, g.best.f_h, g.best.v_l, g.best.t_w, g.best.t_d
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{AttackMode, TrialStatus};

    #[test]
    fn provenance_hashes_config() {
        let a = Provenance::new(7, b"x = 1");
        assert_eq!(a.config_sha256.len(), 64);
        assert_ne!(a.config_sha256, Provenance::new(7, b"x = 2").config_sha256);
        assert!(a.csv_line().starts_with("# tool=dvfault version="));
    }

    #[test]
    fn trial_records_round_trip() {
        let prov = Provenance::new(1, b"");
        let rec = TrialResult {
            trial: 3,
            input_id: 1,
            true_label: 2,
            mode: AttackMode::Targeted { target: 4 },
            baseline_class: 2,
            status: TrialStatus::Completed { predicted: 4 },
            attempts: vec![],
            spent_faults: 0,
        };
        let text = trials_jsonl(&prov, &[rec.clone(), rec.clone()]);
        let (p, back) = read_trials_jsonl(&text).unwrap();
        assert_eq!(p, Some(prov));
        assert_eq!(back, vec![rec.clone(), rec]);
        assert!(read_trials_jsonl("{\"provenance\":1}\nnot json\n").is_err());
    }

    #[test]
    fn confusion_layout() {
        let text = confusion_csv(&Provenance::new(0, b""), &[vec![1, 2], vec![0, 3]]);
        let lines: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(lines, vec!["true\\predicted,0,1", "0,1,2", "1,0,3"]);
    }
}
