use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use moe_lens_core::report::{emit_csv, emit_heatmap, Provenance, Table};
use moe_lens_core::{Checkpoint, SimilarityMatrix};

/// Writes artifacts into one directory, stamping each with the same
/// provenance.
pub struct Sink {
    dir: PathBuf,
    cell: usize,
    pub prov: Provenance,
    pub written: Vec<PathBuf>,
}

impl Sink {
    pub fn new(dir: &Path, cell: usize, prov: Provenance) -> Result<Self> {
        if cell == 0 {
            anyhow::bail!("--cell must be positive");
        }
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            cell,
            prov,
            written: Vec::new(),
        })
    }

    pub fn for_checkpoint(dir: &Path, cell: usize, ckpt: &Checkpoint) -> Result<Self> {
        Self::new(
            dir,
            cell,
            Provenance {
                command: command_line(),
                checkpoint_digest: Some(ckpt.digest()),
                seed: None,
            },
        )
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn csv(&mut self, name: &str, table: &Table) -> Result<()> {
        let a = emit_csv(table, self.path(name), &self.prov)
            .with_context(|| format!("writing {name}"))?;
        self.written.push(a.path);
        Ok(())
    }

    pub fn heatmap(
        &mut self,
        name: &str,
        values: &[Vec<Option<f64>>],
        range: (f64, f64),
    ) -> Result<()> {
        let a = emit_heatmap(values, self.path(name), range, self.cell, &self.prov)
            .with_context(|| format!("writing {name}"))?;
        self.written.push(a.path);
        Ok(())
    }

    /// CSV plus heatmap over the metric's natural range.
    pub fn similarity(&mut self, stem: &str, m: &SimilarityMatrix) -> Result<()> {
        self.csv(&format!("{stem}.csv"), &Table::from_similarity(m))?;
        self.heatmap(&format!("{stem}.ppm"), &m.values, m.metric.range())
    }
}

/// The invocation as typed, minus the program path.
pub fn command_line() -> String {
    std::iter::once("moe-lens".to_string())
        .chain(std::env::args().skip(1))
        .collect::<Vec<_>>()
        .join(" ")
}
