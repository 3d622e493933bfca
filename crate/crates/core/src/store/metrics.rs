use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hcloop::{Branch, RatingEntry};

/// Mean star rating of one input-song combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongMetrics {
    pub input_key: String,
    pub mean_rating: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionMetrics {
    pub version: String,
    pub rows: Vec<SongMetrics>,
    /// Count-weighted mean of the row means.
    pub overall_mean: f64,
    pub total_count: usize,
    pub created_at: u64,
}

/// Builds a snapshot from already aggregated rows.
pub fn metrics_from_rows(
    version: impl Into<String>,
    rows: Vec<SongMetrics>,
    created_at: u64,
) -> Result<VersionMetrics> {
    let total_count: usize = rows.iter().map(|r| r.count).sum();
    if total_count == 0 {
        return Err(Error::EmptyInput("version has no ratings"));
    }
    let overall_mean = rows.iter().map(|r| r.mean_rating * r.count as f64).sum::<f64>() / total_count as f64;
    Ok(VersionMetrics {
        version: version.into(),
        rows,
        overall_mean,
        total_count,
        created_at,
    })
}

/// Per-input means of the stars given to a version's generated songs.
pub fn snapshot_metrics(entries: &[RatingEntry], version: usize, created_at: u64) -> Result<VersionMetrics> {
    let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for e in entries
        .iter()
        .filter(|e| e.model_version == version && e.branch == Branch::Generated)
    {
        let slot = acc.entry(&e.input_key).or_default();
        slot.0 += e.record.stars;
        slot.1 += 1;
    }
    let rows = acc
        .into_iter()
        .map(|(k, (sum, n))| SongMetrics {
            input_key: k.to_string(),
            mean_rating: sum / n as f64,
            count: n,
        })
        .collect();
    metrics_from_rows(format!("v{version}"), rows, created_at)
}

/// Lays snapshots out with one row per input and an overall row, one column
/// pair (rating, count) per version.
pub fn render_table(versions: &[VersionMetrics]) -> String {
    let mut keys: Vec<&str> = versions
        .iter()
        .flat_map(|v| v.rows.iter().map(|r| r.input_key.as_str()))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    let mut out = String::new();
    let _ = write!(out, "{:<14}", "input");
    for v in versions {
        let _ = write!(out, " {:>8} {:>6}", format!("{} avg", v.version), "n");
    }
    out.push('\n');
    for key in keys {
        let _ = write!(out, "{key:<14}");
        for v in versions {
            match v.rows.iter().find(|r| r.input_key == key) {
                Some(r) => {
                    let _ = write!(out, " {:>8.2} {:>6}", r.mean_rating, r.count);
                }
                None => {
                    let _ = write!(out, " {:>8} {:>6}", "-", "-");
                }
            }
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<14}", "overall");
    for v in versions {
        let _ = write!(out, " {:>8.2} {:>6}", v.overall_mean, v.total_count);
    }
    out.push('\n');
    out
}
