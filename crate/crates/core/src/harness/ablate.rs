//! Component ablations: train one model per toggle setting and tabulate
//! validation metrics.

use std::fmt::Write as _;
use std::fs;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, THRESHOLDS};
use crate::tmem::TmemMode;

use super::config::RunConfig;
use super::data::{lexicons, Dataset};
use super::train::Trainer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Fiam,
    Tmem,
    /// Channel modulation inside the alignment module.
    Cm,
    /// Ground-object branch.
    Gob,
    /// Spatial-position branch.
    Spb,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Fiam => "FIAM",
            Axis::Tmem => "TMEM",
            Axis::Cm => "CM",
            Axis::Gob => "GOB",
            Axis::Spb => "SPB",
        }
    }

    fn internal(self) -> bool {
        matches!(self, Axis::Cm | Axis::Gob | Axis::Spb)
    }

    pub fn apply(self, cfg: &mut RunConfig, on: bool) {
        match self {
            Axis::Fiam => cfg.fiam = on,
            Axis::Tmem => cfg.tmem = if on { TmemMode::Text } else { TmemMode::Off },
            Axis::Cm => cfg.channel_modulation = on,
            Axis::Gob => cfg.object_branch = on,
            Axis::Spb => cfg.spatial_branch = on,
        }
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "fiam" => Ok(Axis::Fiam),
            "tmem" => Ok(Axis::Tmem),
            "cm" => Ok(Axis::Cm),
            "gob" => Ok(Axis::Gob),
            "spb" => Ok(Axis::Spb),
            other => Err(Error::Config(format!("unknown ablation axis {other:?}"))),
        }
    }
}

pub fn parse_axes(s: &str) -> Result<Vec<Axis>> {
    let axes: Vec<Axis> = s.split(',').map(str::parse).collect::<Result<_>>()?;
    if axes.is_empty() {
        return Err(Error::Config("no ablation axes".into()));
    }
    for (i, a) in axes.iter().enumerate() {
        if axes[..i].contains(a) {
            return Err(Error::Config(format!("axis {} listed twice", a.name())));
        }
    }
    Ok(axes)
}

/// Toggle settings to train, one `Vec<bool>` per row, aligned with `axes`.
///
/// Axes inside the alignment module are added cumulatively (none, first,
/// first two, ...). Any other combination is a full factorial, starting
/// from everything off and ending with everything on.
pub fn plan(axes: &[Axis]) -> Vec<Vec<bool>> {
    let k = axes.len();
    if axes.iter().all(|a| a.internal()) {
        (0..=k).map(|n| (0..k).map(|i| i < n).collect()).collect()
    } else {
        let mut rows: Vec<Vec<bool>> = (0..1usize << k)
            .map(|bits| (0..k).map(|i| bits >> i & 1 == 1).collect())
            .collect();
        rows.sort_by_key(|r| (r.iter().filter(|&&b| b).count(), r.iter().map(|&b| !b).collect::<Vec<_>>()));
        rows
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub settings: Vec<bool>,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axes: Vec<Axis>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for a in &self.axes {
            let _ = write!(out, "{:>6}", a.name());
        }
        for x in [THRESHOLDS[0], THRESHOLDS[2], THRESHOLDS[4]] {
            let _ = write!(out, "{:>9}", format!("Pr@{x:.1}"));
        }
        let _ = writeln!(out, "{:>9}{:>9}", "oIoU", "mIoU");
        for row in &self.rows {
            for &on in &row.settings {
                let _ = write!(out, "{:>6}", if on { "x" } else { "-" });
            }
            let r = &row.report;
            for x in [THRESHOLDS[0], THRESHOLDS[2], THRESHOLDS[4]] {
                let _ = write!(out, "{:>9.2}", r.pr(x));
            }
            let _ = writeln!(out, "{:>9.2}{:>9.2}", r.oiou, r.miou);
        }
        out
    }

    fn label(axes: &[Axis], settings: &[bool]) -> String {
        let on: Vec<&str> = axes
            .iter()
            .zip(settings)
            .filter(|(_, &s)| s)
            .map(|(a, _)| a.name())
            .collect();
        if on.is_empty() {
            "baseline".into()
        } else {
            on.join("+").to_lowercase()
        }
    }
}

/// Run every row of [`plan`] on the datasets named in `base`, writing each
/// run under `run_dir/ablation/<label>` and the table to
/// `run_dir/ablation.txt` and `run_dir/ablation.json`.
pub fn ablate(base: &RunConfig, axes: &[Axis]) -> Result<AblationTable> {
    let val_path = base
        .val_data
        .as_ref()
        .ok_or_else(|| Error::Config("ablation needs val_data".into()))?;
    let (cats, spatial) = lexicons(base)?;
    let train = Dataset::load(&base.train_data, base.image_size, &cats, &spatial)?;
    let val = Dataset::load(val_path, base.image_size, &cats, &spatial)?;
    ablate_with(base, axes, &train, &val)
}

pub fn ablate_with(base: &RunConfig, axes: &[Axis], train: &Dataset, val: &Dataset) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for settings in plan(axes) {
        let mut cfg = base.clone();
        if axes.iter().all(|a| a.internal()) {
            cfg.fiam = true;
        }
        for (a, &on) in axes.iter().zip(&settings) {
            a.apply(&mut cfg, on);
        }
        cfg.run_dir = base.run_dir.join("ablation").join(AblationTable::label(axes, &settings));
        log::info!("ablation row {}", cfg.run_dir.display());
        let outcome = Trainer::with_data(&cfg, train.clone(), Some(val.clone()))?.run()?;
        let report = outcome
            .report
            .ok_or_else(|| Error::Config("ablation run produced no validation report".into()))?;
        rows.push(AblationRow { settings, report });
    }
    let table = AblationTable {
        axes: axes.to_vec(),
        rows,
    };
    let dir = &base.run_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let txt = dir.join("ablation.txt");
    fs::write(&txt, table.to_text()).map_err(|e| Error::io(&txt, e))?;
    let json = dir.join("ablation.json");
    fs::write(&json, serde_json::to_string_pretty(&table)? + "\n").map_err(|e| Error::io(&json, e))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factorial_plan() {
        let p = plan(&[Axis::Fiam, Axis::Tmem]);
        assert_eq!(
            p,
            vec![vec![false, false], vec![true, false], vec![false, true], vec![true, true]]
        );
        assert_eq!(plan(&[Axis::Fiam, Axis::Tmem, Axis::Cm]).len(), 8);
    }

    #[test]
    fn cumulative_plan() {
        let p = plan(&[Axis::Cm, Axis::Gob, Axis::Spb]);
        assert_eq!(p.len(), 4);
        assert_eq!(p[0], vec![false; 3]);
        assert_eq!(p[2], vec![true, true, false]);
        assert_eq!(p[3], vec![true; 3]);
    }

    #[test]
    fn axis_parsing() {
        assert_eq!(parse_axes("fiam,tmem").unwrap(), vec![Axis::Fiam, Axis::Tmem]);
        assert!(parse_axes("fiam,fiam").is_err());
        assert!(parse_axes("fiam,bogus").is_err());
    }

    #[test]
    fn labels() {
        let axes = [Axis::Fiam, Axis::Tmem];
        assert_eq!(AblationTable::label(&axes, &[false, false]), "baseline");
        assert_eq!(AblationTable::label(&axes, &[true, true]), "fiam+tmem");
    }
}
