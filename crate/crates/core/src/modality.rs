use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The seven supported data modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityKind {
    Table,
    #[serde(rename = "timeseries")]
    TimeSeries,
    Image,
    Audio,
    Graph,
    Text,
    #[serde(rename = "pointcloud")]
    PointCloud,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 7] = [
        ModalityKind::Table,
        ModalityKind::TimeSeries,
        ModalityKind::Image,
        ModalityKind::Audio,
        ModalityKind::Graph,
        ModalityKind::Text,
        ModalityKind::PointCloud,
    ];

    /// Modalities used during pre-training; audio and point clouds are
    /// fine-tuning only.
    pub const PRETRAINING: [ModalityKind; 5] = [
        ModalityKind::Text,
        ModalityKind::Table,
        ModalityKind::TimeSeries,
        ModalityKind::Graph,
        ModalityKind::Image,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModalityKind::Table => "table",
            ModalityKind::TimeSeries => "timeseries",
            ModalityKind::Image => "image",
            ModalityKind::Audio => "audio",
            ModalityKind::Graph => "graph",
            ModalityKind::Text => "text",
            ModalityKind::PointCloud => "pointcloud",
        }
    }

    pub fn is_pretraining(self) -> bool {
        Self::PRETRAINING.contains(&self)
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Ok(match lower.as_str() {
            "table" | "tabular" => ModalityKind::Table,
            "timeseries" | "time-series" | "time_series" | "ts" => ModalityKind::TimeSeries,
            "image" | "vision" => ModalityKind::Image,
            "audio" => ModalityKind::Audio,
            "graph" => ModalityKind::Graph,
            "text" => ModalityKind::Text,
            "pointcloud" | "point-cloud" | "point_cloud" => ModalityKind::PointCloud,
            _ => return Err(Error::Config(alloc::format!("unknown modality {s:?}"))),
        })
    }
}
