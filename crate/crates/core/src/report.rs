//! Per-patient evaluation reports stratified by annotated blood volume.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper edges (mL) of the half-open volume bins `(lo, hi]`.
pub const VOLUME_BIN_EDGES: [f64; 5] = [0.0, 25.0, 50.0, 100.0, 300.0];

pub const OTHER_BIN: &str = "other";
pub const ALL_BIN: &str = "All";

/// Label of the bin an annotated volume falls in, or [`OTHER_BIN`].
pub fn volume_bin(annotated_ml: f64) -> String {
    VOLUME_BIN_EDGES
        .windows(2)
        .find(|e| annotated_ml > e[0] && annotated_ml <= e[1])
        .map(|e| format!("({}, {}]", e[0], e[1]))
        .unwrap_or_else(|| OTHER_BIN.to_string())
}

pub fn bin_labels() -> Vec<String> {
    VOLUME_BIN_EDGES
        .windows(2)
        .map(|e| format!("({}, {}]", e[0], e[1]))
        .collect()
}

/// Measurements for one patient, before binning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientScore {
    pub patient_id: String,
    pub dice: f64,
    pub annotated_ml: f64,
    pub predicted_ml: f64,
}

/// One CSV row of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRow {
    pub patient_id: String,
    pub dice: f64,
    pub annotated_ml: f64,
    pub predicted_ml: f64,
    pub bin: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub bin: String,
    pub count: usize,
    pub mean_dice: Option<f64>,
    /// Sample standard deviation; zero for a single patient.
    pub std_dice: Option<f64>,
}

impl BinSummary {
    fn from_scores(bin: &str, dice: &[f64]) -> Self {
        let count = dice.len();
        let (mean, std) = mean_std(dice);
        Self {
            bin: bin.to_string(),
            count,
            mean_dice: mean,
            std_dice: std,
        }
    }
}

/// Mean and sample standard deviation; `None` for empty input.
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (Some(mean), Some(std))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub patients: Vec<PatientRow>,
    /// The four volume bins in ascending order.
    pub bins: Vec<BinSummary>,
    pub all: BinSummary,
    /// Patients whose annotated volume lies outside (0, 300] mL.
    pub other: BinSummary,
}

/// Groups patients by annotated volume and aggregates Dice per group.
pub fn stratify_report(scores: &[PatientScore]) -> EvalReport {
    let patients: Vec<PatientRow> = scores
        .iter()
        .map(|s| PatientRow {
            patient_id: s.patient_id.clone(),
            dice: s.dice,
            annotated_ml: s.annotated_ml,
            predicted_ml: s.predicted_ml,
            bin: volume_bin(s.annotated_ml),
        })
        .collect();
    for p in patients.iter().filter(|p| p.bin == OTHER_BIN) {
        log::warn!(
            "patient {} has annotated volume {:.2} mL outside (0, 300]",
            p.patient_id,
            p.annotated_ml
        );
    }
    let dice_in = |label: &str| -> Vec<f64> {
        patients
            .iter()
            .filter(|p| p.bin == label)
            .map(|p| p.dice)
            .collect()
    };
    let bins = bin_labels()
        .iter()
        .map(|l| BinSummary::from_scores(l, &dice_in(l)))
        .collect();
    let all: Vec<f64> = patients.iter().map(|p| p.dice).collect();
    EvalReport {
        bins,
        all: BinSummary::from_scores(ALL_BIN, &all),
        other: BinSummary::from_scores(OTHER_BIN, &dice_in(OTHER_BIN)),
        patients,
    }
}

/// JSON summary of a report (aggregates only).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSummary {
    pub bins: Vec<BinSummary>,
    pub all: BinSummary,
    pub other: BinSummary,
}

impl EvalReport {
    /// (annotated, predicted) volume pairs for a calibration scatter.
    pub fn volume_pairs(&self) -> Vec<(f64, f64)> {
        self.patients
            .iter()
            .map(|p| (p.annotated_ml, p.predicted_ml))
            .collect()
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            bins: self.bins.clone(),
            all: self.all.clone(),
            other: self.other.clone(),
        }
    }

    /// Per-patient rows with columns
    /// `patient_id,dice,annotated_ml,predicted_ml,bin`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.patients {
            w.serialize(row)
                .map_err(|e| Error::Data(format!("csv encode: {e}")))?;
        }
        if self.patients.is_empty() {
            w.write_record(["patient_id", "dice", "annotated_ml", "predicted_ml", "bin"])
                .map_err(|e| Error::Data(format!("csv encode: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Data(format!("csv encode: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn volume_csv(&self) -> String {
        let mut out = String::from("patient_id,annotated_ml,predicted_ml\n");
        for p in &self.patients {
            out.push_str(&format!(
                "{},{},{}\n",
                p.patient_id, p.annotated_ml, p.predicted_ml
            ));
        }
        out
    }

    /// Writes `<stem>.csv`, `<stem>.json` and `<stem>_volumes.csv` to `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(&self.summary())
            .map_err(|e| Error::json(&json_path, e))?;
        fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
        let vol_path = dir.join(format!("{stem}_volumes.csv"));
        fs::write(&vol_path, self.volume_csv()).map_err(|e| Error::io(&vol_path, e))?;
        Ok(())
    }
}
