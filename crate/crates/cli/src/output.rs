use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dsac_core::models::{read_checkpoint, write_checkpoint, Mlp};
use serde::Serialize;

use crate::compare::write_csv;
use crate::experiment::ExperimentConfig;

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const LOG_NDJSON: &str = "log.ndjson";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const PREDICTOR_CHECKPOINT: &str = "w.ckpt";
pub const SCORER_CHECKPOINT: &str = "v.ckpt";

/// One results directory: config snapshot, logs, checkpoints and reports.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn subdir(&self, name: &str) -> Result<Self> {
        Self::create(self.root.join(name))
    }

    fn writer(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.path(name);
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(BufWriter::new(f))
    }

    pub fn write_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        self.write_text(CONFIG_SNAPSHOT, &cfg.to_toml()?)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let mut w = self.writer(name)?;
        w.write_all(text.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn write_json<S: Serialize>(&self, name: &str, value: &S) -> Result<()> {
        let mut w = self.writer(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn write_csv<S: Serialize>(&self, name: &str, rows: &[S]) -> Result<()> {
        write_csv(rows, self.writer(name)?)
    }

    pub fn write_ndjson<'a, S: Serialize + 'a>(&self, name: &str, records: impl IntoIterator<Item = &'a S>) -> Result<()> {
        let mut w = self.writer(name)?;
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the predictor and scorer checkpoints.
    pub fn write_params(&self, w: &Mlp<f64>, v: &Mlp<f64>) -> Result<()> {
        for (name, net) in [(PREDICTOR_CHECKPOINT, w), (SCORER_CHECKPOINT, v)] {
            let mut out = self.writer(name)?;
            write_checkpoint(net, &mut out)?;
            out.flush()?;
        }
        Ok(())
    }
}

/// Reads the predictor and scorer checkpoints written by
/// [`RunDir::write_params`].
pub fn read_params(dir: &Path) -> Result<(Mlp<f64>, Mlp<f64>)> {
    let read = |name: &str| -> Result<Mlp<f64>> {
        let path = dir.join(name);
        let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        Ok(read_checkpoint(BufReader::new(f))?)
    };
    Ok((read(PREDICTOR_CHECKPOINT)?, read(SCORER_CHECKPOINT)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dsac_core::models::MlpSpec;
    use rand::SeedableRng;

    #[test]
    fn params_round_trip_through_a_run_dir() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::create(tmp.path().join("run")).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let w = Mlp::glorot(MlpSpec::relu_net(vec![3, 4, 3]), &mut rng).unwrap();
        let v = Mlp::glorot(MlpSpec::scorer(5), &mut rng).unwrap();
        dir.write_params(&w, &v).unwrap();
        let (w2, v2) = read_params(dir.root()).unwrap();
        assert_eq!(w.params.values, w2.params.values);
        assert_eq!(v.spec, v2.spec);
    }

    #[test]
    fn ndjson_is_one_record_per_line() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::create(tmp.path()).unwrap();
        dir.write_ndjson(LOG_NDJSON, &[1, 2, 3]).unwrap();
        let text = fs::read_to_string(dir.path(LOG_NDJSON)).unwrap();
        assert_eq!(text, "1\n2\n3\n");
    }
}
