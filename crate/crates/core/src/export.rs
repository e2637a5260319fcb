//! CSV and JSON artifacts. Every file goes through [`write_atomic`].

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{Map, Value};

use crate::agent::EpisodeRecord;
use crate::env::Env;
use crate::error::{Error, Result};
use crate::eval::{CompareRow, GapCdf, RobustnessCurve};
use crate::explainer::ImportanceEntry;

pub const SUMMARY_FILE: &str = "summary.json";

/// Writes `contents` to a temp file beside `path`, then renames it into
/// place, so readers never see a truncated file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn history_csv(history: &[EpisodeRecord]) -> String {
    let mut s = String::from("episode,total_reward,loss,baseline\n");
    for h in history {
        let _ = writeln!(s, "{},{},{},{}", h.episode, h.total_reward, h.loss, h.baseline);
    }
    s
}

pub fn gap_cdf_csv(cdf: &GapCdf) -> String {
    let mut s = String::from("abs_gap,cum_fraction\n");
    for (g, f) in &cdf.points {
        let _ = writeln!(s, "{g},{f}");
    }
    s
}

pub fn robustness_csv(curve: &RobustnessCurve) -> String {
    let mut s = String::from("noise_std,mean_reward,std_reward\n");
    for i in 0..curve.noise_levels.len() {
        let _ = writeln!(s, "{},{},{}", curve.noise_levels[i], curve.mean_reward[i], curve.std_reward[i]);
    }
    s
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut s = String::from("agent,episode,mean_reward,smoothed\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.agent, r.episode, r.mean_reward, r.smoothed);
    }
    s
}

pub fn explain_csv(checkpoint: &str, report: &[ImportanceEntry]) -> String {
    let mut s = String::from("checkpoint,src,dst,importance,is_active\n");
    for e in report {
        let _ = writeln!(s, "{checkpoint},{},{},{},{}", e.edge.0, e.edge.1, e.importance, e.is_active);
    }
    s
}

/// One row per explained checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TimelineRow {
    pub stage: String,
    pub episode: usize,
    pub mean_importance: f64,
    pub variance: f64,
    pub active_edges: usize,
    pub preserved: bool,
}

pub fn timeline_csv(rows: &[TimelineRow]) -> String {
    let mut s = String::from("stage,episode,mean_importance,variance,active_edges,preserved\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.stage, r.episode, r.mean_importance, r.variance, r.active_edges, r.preserved
        );
    }
    s
}

pub fn traffic_csv(env: &Env) -> String {
    let mut s = String::from("step,demand_bits,required_prbs\n");
    for (i, (d, r)) in env.demand_bits().iter().zip(env.required_series()).enumerate() {
        let _ = writeln!(s, "{i},{d},{r}");
    }
    s
}

/// Merges `fields` into `dir/summary.json` (keys sorted) and stamps it.
/// An unreadable or non-object existing summary is replaced.
pub fn update_summary(dir: &Path, fields: Map<String, Value>) -> Result<Value> {
    let path = dir.join(SUMMARY_FILE);
    let mut doc = std::fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str::<Value>(&t).ok())
        .and_then(|v| match v {
            Value::Object(m) => Some(m),
            _ => None,
        })
        .unwrap_or_default();
    doc.extend(fields);
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    doc.insert("timestamp".into(), Value::from(secs));
    let value = Value::Object(doc);
    let mut text = serde_json::to_string_pretty(&value).expect("summary serialises");
    text.push('\n');
    write_atomic(&path, text.as_bytes())?;
    Ok(value)
}
