use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::data::SplitKind;
use crate::error::{Error, Result};
use crate::fsl::mean_std;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "supervised")]
    Supervised,
    #[serde(rename = "FSL")]
    Fsl,
    #[serde(rename = "FSL+EvoFA")]
    FslEvofa,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::Fsl => "FSL",
            Method::FslEvofa => "FSL+EvoFA",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One evaluated (subject, session, method, shots) cell. Supervised rows have
/// `shots = 0`, `std = 0` and an empty digest; `episodes` counts test samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub protocol: SplitKind,
    pub subject: u32,
    /// Session of the inter-subject protocol; unset for intra.
    pub session: Option<u32>,
    pub method: Method,
    pub shots: usize,
    pub mean_accuracy: f64,
    /// Sample std over the cell's episodes.
    pub std: f64,
    pub episodes: usize,
    /// Hex digest over the ordered episode digests; equal for paired rows.
    pub episode_digest: String,
    pub wall_clock_secs: f64,
}

/// Summary of all rows sharing a (method, shots) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub protocol: SplitKind,
    pub method: Method,
    pub shots: usize,
    pub cells: usize,
    pub mean_accuracy: f64,
    pub std_across_subjects: f64,
    pub mean_episode_std: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

/// Fixed CSV column order.
pub const CSV_COLUMNS: [&str; 11] = [
    "scope",
    "protocol",
    "subject",
    "session",
    "method",
    "shots",
    "mean_accuracy",
    "std",
    "mean_episode_std",
    "episodes",
    "episode_digest",
];

fn protocol_str(p: SplitKind) -> &'static str {
    match p {
        SplitKind::Intra => "intra",
        SplitKind::Inter => "inter",
    }
}

impl ResultTable {
    pub fn new(mut rows: Vec<ResultRow>) -> Self {
        rows.sort_by(|a, b| {
            (a.session, a.subject, a.method, a.shots).cmp(&(b.session, b.subject, b.method, b.shots))
        });
        Self { rows }
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if !(0.0..=1.0).contains(&r.mean_accuracy) || !(r.std >= 0.0) {
                return Err(Error::contract(format!(
                    "row subject {} {}: accuracy {} std {}",
                    r.subject, r.method, r.mean_accuracy, r.std
                )));
            }
        }
        Ok(())
    }

    /// Aggregates ordered by (method, shots). The std across subjects is the
    /// sample std of the cell means.
    pub fn aggregates(&self) -> Vec<AggregateRow> {
        let mut groups: BTreeMap<(Method, usize), Vec<&ResultRow>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry((r.method, r.shots)).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|((method, shots), rows)| {
                let means: Vec<f64> = rows.iter().map(|r| r.mean_accuracy).collect();
                let stds: Vec<f64> = rows.iter().map(|r| r.std).collect();
                let (mean, std) = mean_std(&means);
                AggregateRow {
                    protocol: rows[0].protocol,
                    method,
                    shots,
                    cells: rows.len(),
                    mean_accuracy: mean,
                    std_across_subjects: std,
                    mean_episode_std: mean_std(&stds).0,
                    episodes: rows.iter().map(|r| r.episodes).sum(),
                }
            })
            .collect()
    }

    pub fn find(&self, subject: u32, session: Option<u32>, method: Method, shots: usize) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| (r.subject, r.session, r.method, r.shots) == (subject, session, method, shots))
    }

    /// Cell rows, then aggregate rows. Wall-clock time is omitted so identical
    /// runs produce identical bytes.
    pub fn to_csv(&self) -> String {
        let mut s = CSV_COLUMNS.join(",");
        s.push('\n');
        for r in &self.rows {
            let session = r.session.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "cell,{},{},{},{},{},{},{},{},{},{}",
                protocol_str(r.protocol),
                r.subject,
                session,
                r.method,
                r.shots,
                r.mean_accuracy,
                r.std,
                r.std,
                r.episodes,
                r.episode_digest
            );
        }
        for a in self.aggregates() {
            let _ = writeln!(
                s,
                "aggregate,{},,,{},{},{},{},{},{},",
                protocol_str(a.protocol),
                a.method,
                a.shots,
                a.mean_accuracy,
                a.std_across_subjects,
                a.mean_episode_std,
                a.episodes
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            rows: &'a [ResultRow],
            aggregates: Vec<AggregateRow>,
        }
        Ok(serde_json::to_string_pretty(&Doc {
            rows: &self.rows,
            aggregates: self.aggregates(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            rows: Vec<ResultRow>,
        }
        let doc: Doc = serde_json::from_str(text)?;
        Ok(Self::new(doc.rows))
    }

    /// `shots,method,mean_accuracy,std_across_subjects,mean_episode_std,cells`
    /// for every few-shot aggregate.
    pub fn shots_csv(&self) -> String {
        let mut s = String::from("shots,method,mean_accuracy,std_across_subjects,mean_episode_std,cells\n");
        let mut aggs: Vec<AggregateRow> =
            self.aggregates().into_iter().filter(|a| a.method != Method::Supervised).collect();
        aggs.sort_by_key(|a| (a.shots, a.method));
        for a in aggs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                a.shots, a.method, a.mean_accuracy, a.std_across_subjects, a.mean_episode_std, a.cells
            );
        }
        s
    }

    pub fn merge(&mut self, other: ResultTable) {
        let mut rows = std::mem::take(&mut self.rows);
        rows.extend(other.rows);
        *self = Self::new(rows);
    }
}

/// Hex digest over an ordered list of episode digests.
pub fn digest_hex(digests: &[u64]) -> String {
    let mut h = crate::tensor::Fnv1a::new();
    for &d in digests {
        h.write_u64(d);
    }
    format!("{:016x}", h.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(subject: u32, method: Method, acc: f64, std: f64) -> ResultRow {
        ResultRow {
            protocol: SplitKind::Intra,
            subject,
            session: None,
            method,
            shots: 1,
            mean_accuracy: acc,
            std,
            episodes: 10,
            episode_digest: "ab".into(),
            wall_clock_secs: 1.5,
        }
    }

    #[test]
    fn aggregates_recompute_from_rows() {
        let t = ResultTable::new(vec![
            row(2, Method::Fsl, 0.5, 0.1),
            row(1, Method::Fsl, 0.7, 0.3),
            row(1, Method::FslEvofa, 0.9, 0.0),
        ]);
        assert_eq!(t.rows[0].subject, 1);
        let a = t.aggregates();
        assert_eq!(a.len(), 2);
        assert!((a[0].mean_accuracy - 0.6).abs() < 1e-12);
        assert!((a[0].std_across_subjects - 0.02f64.sqrt()).abs() < 1e-12);
        assert!((a[0].mean_episode_std - 0.2).abs() < 1e-12);
        assert_eq!(a[0].episodes, 20);
    }

    #[test]
    fn csv_has_fixed_columns_and_no_wall_clock() {
        let t = ResultTable::new(vec![row(1, Method::Fsl, 0.5, 0.1)]);
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_COLUMNS.join(","));
        assert_eq!(lines[1], "cell,intra,1,,FSL,1,0.5,0.1,0.1,10,ab");
        assert!(lines[2].starts_with("aggregate,intra,,,FSL,1,0.5,0,0.1,10"));
        assert!(!csv.contains("1.5"));
        assert!(lines.iter().all(|l| l.split(',').count() == CSV_COLUMNS.len()));
    }

    #[test]
    fn json_round_trip() {
        let t = ResultTable::new(vec![row(1, Method::Supervised, 0.5, 0.0)]);
        assert_eq!(ResultTable::from_json(&t.to_json().unwrap()).unwrap(), t);
        assert!(t.to_json().unwrap().contains("\"supervised\""));
    }

    #[test]
    fn out_of_range_accuracy_fails_validation() {
        assert!(ResultTable::new(vec![row(1, Method::Fsl, 1.5, 0.0)]).validate().is_err());
    }
}
