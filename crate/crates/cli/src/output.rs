//! Run artifacts: CSV dumps, JSON documents and the run manifest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context as _;
use safehood_core::{CriticalityClass, HybridAutomaton, HybridTrajectory, Neighborhood, NeighborhoodKind};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn state_headers(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}x{i}"))
}

/// One row per dense-output sample. The row at an exit time carries the name
/// of the event taken there; all other rows leave `event` empty.
pub fn write_trajectory(path: &Path, h: &HybridAutomaton, traj: &HybridTrajectory) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec!["segment_index".to_string(), "location".into(), "t".into()];
    header.extend(state_headers("", h.dimension));
    header.push("event".into());
    w.write_record(&header)?;
    for (i, seg) in traj.segments.iter().enumerate() {
        let loc = &h.location(seg.location).id;
        let taken = traj.events.get(i).filter(|_| i + 1 < traj.segments.len());
        let last = seg.samples.len().saturating_sub(1);
        for (k, (t, x)) in seg.samples.iter().enumerate() {
            let mut row = vec![i.to_string(), loc.clone(), t.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            row.push(match taken {
                Some(e) if k == last => h.event(e.event).name.clone(),
                _ => String::new(),
            });
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub struct NeighborhoodRow {
    pub location: usize,
    pub center: Vec<f64>,
    pub radius: f64,
    pub kind: NeighborhoodKind,
    pub class: CriticalityClass,
}

impl NeighborhoodRow {
    pub fn new(n: &Neighborhood, class: CriticalityClass) -> Self {
        NeighborhoodRow {
            location: n.location.0,
            center: n.center.iter().copied().collect(),
            radius: n.radius,
            kind: n.kind,
            class,
        }
    }
}

fn kebab(v: &impl Serialize) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

/// `location, center_x1..xn, radius, kind, critical_class`.
pub fn write_neighborhoods(path: &Path, n: usize, rows: &[NeighborhoodRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec!["location".to_string()];
    header.extend(state_headers("center_", n));
    header.extend(["radius".into(), "kind".into(), "critical_class".into()]);
    w.write_record(&header)?;
    for r in rows {
        let mut row = vec![r.location.to_string()];
        row.extend(r.center.iter().map(|v| v.to_string()));
        row.extend([r.radius.to_string(), kebab(&r.kind), kebab(&r.class)]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub model: PathBuf,
    pub command: String,
    pub overrides: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub artifacts: Vec<String>,
    pub wall_time_s: f64,
    pub timestamp_unix_s: u64,
}

impl Manifest {
    pub fn new(
        model: &Path,
        command: &str,
        overrides: &BTreeMap<String, String>,
        seed: Option<u64>,
        out_dir: &Path,
        artifacts: Vec<&str>,
        start: Instant,
    ) -> Self {
        Manifest {
            model: std::path::absolute(model).unwrap_or_else(|_| model.to_path_buf()),
            command: command.into(),
            overrides: overrides.clone(),
            seed,
            out_dir: out_dir.to_path_buf(),
            artifacts: artifacts.into_iter().map(String::from).collect(),
            wall_time_s: start.elapsed().as_secs_f64(),
            timestamp_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    /// Writes to a temporary file and renames it into place.
    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        for a in &self.artifacts {
            anyhow::ensure!(dir.join(a).is_file(), "artifact {a} missing");
        }
        let tmp = dir.join(".manifest.json.tmp");
        write_json(&tmp, self)?;
        std::fs::rename(&tmp, dir.join(MANIFEST))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> anyhow::Result<Manifest> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}
