use std::path::Path;

use anyhow::Context;
use modelguard_core::{AttackReport, FoEvaluation};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Model accuracy and watermark status (train and embed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub method: String,
    pub epochs: usize,
    pub accuracy: f64,
    pub verification: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractRow {
    pub checkpoint: String,
    pub expected: String,
    pub extracted: String,
    pub matched: bool,
    pub hamming: usize,
    pub config_hash: String,
}

/// Authentication success per fingerprint output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoRow {
    pub class: usize,
    pub confidence: f64,
    pub user_id: u64,
    pub generated: usize,
    pub authenticated: usize,
    pub success_rate: f64,
    pub mean_l2: f64,
    pub config_hash: String,
}

impl FoRow {
    pub fn new(e: &FoEvaluation, hash: &str) -> Self {
        Self {
            class: e.class,
            confidence: e.confidence,
            user_id: e.user_id,
            generated: e.generated,
            authenticated: e.authenticated,
            success_rate: e.success_rate,
            mean_l2: e.mean_l2,
            config_hash: hash.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRow {
    pub user_id: u64,
    pub class: usize,
    pub confidence: f64,
    pub authenticated: bool,
    pub config_hash: String,
}

/// Accuracy seen through each inference path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRow {
    pub path: String,
    pub accuracy: f64,
    pub samples: usize,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub attack: String,
    pub params: String,
    pub accuracy: Option<f64>,
    pub wm_matched: Option<bool>,
    pub forgery_rate: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
}

impl AttackRow {
    pub fn new(r: &AttackReport, hash: &str) -> Self {
        Self {
            attack: r.attack.clone(),
            params: r.params.clone(),
            accuracy: r.accuracy,
            wm_matched: r.wm_matched,
            forgery_rate: r.forgery_rate,
            seed: r.seed,
            config_hash: hash.into(),
        }
    }
}

pub const TRAIN_CSV: &str = "train.csv";
pub const EMBED_CSV: &str = "embed.csv";
pub const EXTRACT_CSV: &str = "extract.csv";
pub const FINGERPRINTS_CSV: &str = "fingerprints.csv";
pub const USERS_CSV: &str = "auth_users.csv";
pub const AUTH_CSV: &str = "auth.csv";
pub const ATTACKS_CSV: &str = "attacks.csv";

const MODEL_COLUMNS: &[&str] = &[
    "model",
    "method",
    "epochs",
    "accuracy",
    "verification",
    "config_hash",
];
const EXTRACT_COLUMNS: &[&str] = &[
    "checkpoint",
    "expected",
    "extracted",
    "matched",
    "hamming",
    "config_hash",
];
const FO_COLUMNS: &[&str] = &[
    "class",
    "confidence",
    "user_id",
    "generated",
    "authenticated",
    "success_rate",
    "mean_l2",
    "config_hash",
];
const USER_COLUMNS: &[&str] = &[
    "user_id",
    "class",
    "confidence",
    "authenticated",
    "config_hash",
];
const PATH_COLUMNS: &[&str] = &["path", "accuracy", "samples", "config_hash"];
const ATTACK_COLUMNS: &[&str] = &[
    "attack",
    "params",
    "accuracy",
    "wm_matched",
    "forgery_rate",
    "seed",
    "config_hash",
];

/// Column order of every CSV report, as documented in `schema.json`.
pub fn csv_columns() -> Value {
    json!({
        TRAIN_CSV: MODEL_COLUMNS,
        EMBED_CSV: MODEL_COLUMNS,
        EXTRACT_CSV: EXTRACT_COLUMNS,
        FINGERPRINTS_CSV: FO_COLUMNS,
        USERS_CSV: USER_COLUMNS,
        AUTH_CSV: PATH_COLUMNS,
        ATTACKS_CSV: ATTACK_COLUMNS,
    })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header<T: Serialize>(row: T) -> Vec<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(row).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        text.lines()
            .next()
            .unwrap()
            .split(',')
            .map(String::from)
            .collect()
    }

    #[test]
    fn documented_columns_match_serialized_headers() {
        let h = String::from("h");
        assert_eq!(
            header(ModelRow {
                model: "m".into(),
                method: "m".into(),
                epochs: 1,
                accuracy: 0.5,
                verification: "n/a".into(),
                config_hash: h.clone(),
            }),
            MODEL_COLUMNS
        );
        assert_eq!(
            header(ExtractRow {
                checkpoint: "c".into(),
                expected: "1".into(),
                extracted: "1".into(),
                matched: true,
                hamming: 0,
                config_hash: h.clone(),
            }),
            EXTRACT_COLUMNS
        );
        assert_eq!(
            header(FoRow {
                class: 0,
                confidence: 0.2,
                user_id: 1,
                generated: 1,
                authenticated: 1,
                success_rate: 1.0,
                mean_l2: 1.0,
                config_hash: h.clone(),
            }),
            FO_COLUMNS
        );
        assert_eq!(
            header(UserRow {
                user_id: 1,
                class: 0,
                confidence: 0.2,
                authenticated: true,
                config_hash: h.clone(),
            }),
            USER_COLUMNS
        );
        assert_eq!(
            header(PathRow {
                path: "p".into(),
                accuracy: 1.0,
                samples: 1,
                config_hash: h.clone(),
            }),
            PATH_COLUMNS
        );
        assert_eq!(
            header(AttackRow {
                attack: "a".into(),
                params: "p".into(),
                accuracy: None,
                wm_matched: None,
                forgery_rate: Some(0.0),
                seed: 0,
                config_hash: h,
            }),
            ATTACK_COLUMNS
        );
    }

    #[test]
    fn optional_cells_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let rows = vec![AttackRow {
            attack: "forgery".into(),
            params: "method=clean;budget=10".into(),
            accuracy: None,
            wm_matched: None,
            forgery_rate: Some(0.1),
            seed: 4,
            config_hash: "x".into(),
        }];
        write_csv(&path, &rows).unwrap();
        assert_eq!(read_csv::<AttackRow>(&path).unwrap(), rows);
    }
}
