// SPDX-License-Identifier: MIT OR Apache-2.0

//! Aggregates the `result.json` files of an explain or simulate run into a
//! winner-origin breakdown and a histogram of the step at which each
//! neuron's final best concept was found.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{OriginCounts, ResultSummary};
use crate::error::{LineError, Result};
use crate::io::atomic_write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub neurons: usize,
    pub iterations: u32,
    pub origins: OriginCounts,
    /// `discovery[t]` neurons found their best concept at step `t`, for
    /// `t` in `0..=N+1`; the last bin is the summary step.
    pub discovery: Vec<usize>,
    #[serde(with = "crate::fixed6::vec")]
    pub mean_cumulative_best: Vec<f64>,
}

/// Every `<run>/neurons/<layer>/<index>/result.json`, sorted.
pub fn result_files(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let root = run_dir.join("neurons");
    let mut out = Vec::new();
    if !root.is_dir() {
        return Ok(out);
    }
    for layer in std::fs::read_dir(&root)? {
        let layer = layer?.path();
        if !layer.is_dir() {
            continue;
        }
        for neuron in std::fs::read_dir(&layer)? {
            let path = neuron?.path().join("result.json");
            if path.is_file() {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_results(run_dir: &Path) -> Result<Vec<ResultSummary>> {
    let files = result_files(run_dir)?;
    if files.is_empty() {
        return Err(LineError::Config(format!(
            "no neuron results under {}",
            run_dir.join("neurons").display()
        )));
    }
    files
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| LineError::Config(format!("{}: {e}", p.display())))
        })
        .collect()
}

impl RunReport {
    pub fn from_results(results: &[ResultSummary]) -> Result<Self> {
        let first = results
            .first()
            .ok_or_else(|| LineError::Config("no neuron results to report".into()))?;
        let n = first.iterations;
        if let Some(r) = results.iter().find(|r| r.iterations != n) {
            return Err(LineError::Config(format!(
                "mixed iteration counts: {} has {}, expected {n}",
                r.neuron, r.iterations
            )));
        }
        let bins = n as usize + 2;
        let mut origins = OriginCounts::default();
        let mut discovery = vec![0; bins];
        let mut sums = vec![0.0; bins];
        for r in results {
            origins.add(r.origin);
            let step = r.best_step as usize;
            if step >= bins {
                return Err(LineError::Config(format!(
                    "{}: best_step {step} outside 0..={}",
                    r.neuron,
                    n + 1
                )));
            }
            discovery[step] += 1;
            if r.cumulative_best.len() != bins {
                return Err(LineError::Arity {
                    expected: bins,
                    got: r.cumulative_best.len(),
                });
            }
            for (s, v) in sums.iter_mut().zip(&r.cumulative_best) {
                *s += v;
            }
        }
        let k = results.len() as f64;
        Ok(Self {
            neurons: results.len(),
            iterations: n,
            origins,
            discovery,
            mean_cumulative_best: sums.into_iter().map(|s| s / k).collect(),
        })
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        Self::from_results(&load_results(run_dir)?)
    }

    fn step_name(&self, i: usize) -> String {
        if i == self.iterations as usize + 1 {
            "S".into()
        } else {
            i.to_string()
        }
    }

    /// `origin,count,share`
    pub fn origins_csv(&self) -> String {
        let total = self.origins.total().max(1) as f64;
        let mut out = String::from("origin,count,share\n");
        for (name, c) in [
            ("predefined", self.origins.predefined),
            ("generated", self.origins.generated),
            ("summary", self.origins.summary),
        ] {
            out.push_str(&format!("{name},{c},{:.6}\n", c as f64 / total));
        }
        out
    }

    /// `step,discovered,rate,cumulative_rate,mean_best`
    pub fn discovery_csv(&self) -> String {
        let total = self.neurons.max(1) as f64;
        let mut out = String::from("step,discovered,rate,cumulative_rate,mean_best\n");
        let mut cum = 0;
        for (i, (&d, m)) in self
            .discovery
            .iter()
            .zip(&self.mean_cumulative_best)
            .enumerate()
        {
            cum += d;
            out.push_str(&format!(
                "{},{d},{:.6},{:.6},{m:.6}\n",
                self.step_name(i),
                d as f64 / total,
                cum as f64 / total
            ));
        }
        out
    }

    /// Writes `report.json`, `report_origins.csv` and `report_discovery.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        atomic_write(
            &dir.join("report_origins.csv"),
            self.origins_csv().as_bytes(),
        )?;
        atomic_write(
            &dir.join("report_discovery.csv"),
            self.discovery_csv().as_bytes(),
        )?;
        let json = serde_json::to_string_pretty(self)? + "\n";
        atomic_write(&dir.join("report.json"), json.as_bytes())
    }
}
