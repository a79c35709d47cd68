use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use xverify_core::confidence::Label;
use xverify_core::{MethodKind, PatchSpec};

use crate::pairs::PairLabel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStatus {
    Ok,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    /// The input image as processed.
    Source,
    /// Blended explanation image.
    Xmap,
    /// Colormapped similarity map.
    Smap,
}

impl ArtifactKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::Source => "source",
            ArtifactKind::Xmap => "xmap",
            ArtifactKind::Smap => "smap",
        }
    }
}

impl FromStr for ArtifactKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "source" => Ok(ArtifactKind::Source),
            "xmap" => Ok(ArtifactKind::Xmap),
            "smap" => Ok(ArtifactKind::Smap),
            other => Err(format!("unknown artifact kind {other:?}, expected xmap|smap|source")),
        }
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: ArtifactKind,
    /// Image side, 1 or 2.
    pub which: u8,
    /// `None` for source images.
    pub method: Option<MethodKind>,
    /// Path relative to the `<dataset>/<model>` directory.
    pub path: String,
}

impl Artifact {
    pub fn file_name(kind: ArtifactKind, which: u8, method: Option<MethodKind>) -> String {
        match method {
            Some(m) => format!("{kind}_{which}_{m}.png"),
            None => format!("{kind}_{which}.png"),
        }
    }

    pub fn new(pair_id: &str, kind: ArtifactKind, which: u8, method: Option<MethodKind>) -> Self {
        Self {
            kind,
            which,
            method,
            path: format!("{pair_id}/{}", Self::file_name(kind, which, method)),
        }
    }
}

/// One pair's outcome for one model. Failed pairs keep their error and have
/// no distance, scores or artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub pair_id: String,
    pub dataset: String,
    pub model: String,
    pub label: PairLabel,
    pub fold: u8,
    pub path1: String,
    pub path2: String,
    pub status: PairStatus,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub d_orig: Option<f64>,
    #[serde(default)]
    pub prediction: Option<Label>,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub c_score: Option<f64>,
    pub methods: Vec<MethodKind>,
    pub artifacts: Vec<Artifact>,
    pub created_at: String,
    pub parameters: Vec<PatchSpec>,
    /// Reserved for an image quality metric; never filled by the pipeline.
    #[serde(default)]
    pub quality_score: Option<f64>,
}

impl ResultRecord {
    /// `Some(label == prediction)` when both are known.
    pub fn correct(&self) -> Option<bool> {
        Some(self.label.known()? == self.prediction?)
    }

    pub fn artifact(&self, kind: ArtifactKind, which: u8, method: Option<MethodKind>) -> Option<&Artifact> {
        self.artifacts
            .iter()
            .find(|a| a.kind == kind && a.which == which && a.method == method)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Genuine,
    Imposter,
    Unsure,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub pair_id: String,
    pub dataset: String,
    pub operator: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub note: String,
    pub created_at: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> ResultRecord {
        ResultRecord {
            pair_id: "p1".into(),
            dataset: "lfw".into(),
            model: "reference".into(),
            label: PairLabel::Imposter,
            fold: 2,
            path1: "/a.png".into(),
            path2: "/b.png".into(),
            status: PairStatus::Ok,
            error: None,
            d_orig: Some(0.123_456_789_012_345_67),
            prediction: Some(Label::Genuine),
            threshold: Some(0.3),
            c_score: Some(0.1 + 0.2),
            methods: vec![MethodKind::I, MethodKind::III],
            artifacts: vec![Artifact::new("p1", ArtifactKind::Xmap, 1, Some(MethodKind::III))],
            created_at: "2026-01-01T00:00:00.000Z".into(),
            parameters: PatchSpec::default_sweep(),
            quality_score: None,
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let r = record();
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"prediction\":\"genuine\""));
        assert!(text.contains("\"methods\":[\"I\",\"III\"]"));
        let back: ResultRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn correctness() {
        let mut r = record();
        assert_eq!(r.correct(), Some(false));
        r.label = PairLabel::Genuine;
        assert_eq!(r.correct(), Some(true));
        r.label = PairLabel::Unknown;
        assert_eq!(r.correct(), None);
    }

    #[test]
    fn artifact_names() {
        let a = Artifact::new("p9", ArtifactKind::Smap, 2, Some(MethodKind::II));
        assert_eq!(a.path, "p9/smap_2_II.png");
        assert_eq!(Artifact::new("p9", ArtifactKind::Source, 1, None).path, "p9/source_1.png");
        assert!(record().artifact(ArtifactKind::Xmap, 1, Some(MethodKind::III)).is_some());
        assert!(record().artifact(ArtifactKind::Xmap, 2, Some(MethodKind::III)).is_none());
    }
}
