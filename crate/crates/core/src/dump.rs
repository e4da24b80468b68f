//! Plain-text episode and trajectory dumps for golden tests and plotting.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::tasks::Prompt;

/// One prompt as a flat JSON record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub family: String,
    pub d: usize,
    pub k: usize,
    pub seed: u64,
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
    pub query_x: Vec<f64>,
    pub query_y: f64,
}

impl From<&Prompt> for EpisodeRecord {
    fn from(p: &Prompt) -> Self {
        Self {
            family: p.meta.family.name().to_string(),
            d: p.d(),
            k: p.k(),
            seed: p.meta.seed,
            xs: p.context().to_vec(),
            ys: p.ys.clone(),
            query_x: p.query().to_vec(),
            query_y: p.query_target,
        }
    }
}

/// Writes one JSON record per line.
pub fn write_episodes(path: &Path, prompts: &[Prompt]) -> Result<()> {
    let mut out = Vec::new();
    for p in prompts {
        serde_json::to_writer(&mut out, &EpisodeRecord::from(p))?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// CSV with columns `t, x_0 .. x_{D-1}, y`.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let dim = traj.states.first().map_or(0, Vec::len);
    let mut out = String::from("t");
    for i in 0..dim {
        let _ = write!(out, ",x_{i}");
    }
    out.push_str(",y\n");
    for (t, (x, y)) in traj.states.iter().zip(&traj.labels).enumerate() {
        let _ = write!(out, "{t}");
        for v in x {
            let _ = write!(out, ",{v:?}");
        }
        let _ = writeln!(out, ",{y:?}");
    }
    out
}
