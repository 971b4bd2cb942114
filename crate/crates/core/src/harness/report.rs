use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::RunMode;
use crate::layers::Arch;

/// Outcome of one training run. `selected_epoch` is 1-based; 0 means the
/// untrained initialization (only possible with `epochs = 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub arch: Arch,
    pub mode: RunMode,
    pub alpha: f64,
    pub seed: u64,
    pub epochs: usize,
    pub train_loss_per_epoch: Vec<f64>,
    pub dev_acc_per_epoch: Vec<f64>,
    pub selected_epoch: usize,
    pub selected_dev_acc: f64,
    pub test_acc: f64,
    pub param_count: usize,
    pub param_ratio: f64,
}

impl RunReport {
    /// Bitwise comparison of everything the optimization produced, ignoring
    /// the labels that name the run (`mode`, `alpha`).
    pub fn same_outcome(&self, other: &RunReport) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.arch == other.arch
            && self.seed == other.seed
            && self.epochs == other.epochs
            && bits(&self.train_loss_per_epoch) == bits(&other.train_loss_per_epoch)
            && bits(&self.dev_acc_per_epoch) == bits(&other.dev_acc_per_epoch)
            && self.selected_epoch == other.selected_epoch
            && self.selected_dev_acc.to_bits() == other.selected_dev_acc.to_bits()
            && self.test_acc.to_bits() == other.test_acc.to_bits()
            && self.param_count == other.param_count
            && self.param_ratio.to_bits() == other.param_ratio.to_bits()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()? + "\n")
            .map_err(|e| Error::io(format!("writing {}", json.display()), e))?;
        let txt = dir.join("report.txt");
        std::fs::write(&txt, self.to_string())
            .map_err(|e| Error::io(format!("writing {}", txt.display()), e))
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "arch {}  mode {}  alpha {}  seed {}  epochs {}",
            self.arch, self.mode, self.alpha, self.seed, self.epochs
        )?;
        writeln!(f, "{:>5}  {:>10}  {:>8}", "epoch", "train_loss", "dev_acc")?;
        for (i, (loss, acc)) in self
            .train_loss_per_epoch
            .iter()
            .zip(&self.dev_acc_per_epoch)
            .enumerate()
        {
            let mark = if i + 1 == self.selected_epoch { " *" } else { "" };
            writeln!(f, "{:>5}  {:>10.5}  {:>8.4}{mark}", i + 1, loss, acc)?;
        }
        writeln!(
            f,
            "selected epoch {} (dev {:.4})  test accuracy {:.4}",
            self.selected_epoch, self.selected_dev_acc, self.test_acc
        )?;
        writeln!(
            f,
            "trainable parameters {}  (teacher/student x{:.1})",
            self.param_count, self.param_ratio
        )
    }
}
