//! Where each artifact lives inside a run directory.

use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        RunLayout { root: root.to_path_buf() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn data(&self, split: &str) -> PathBuf {
        self.root.join("data").join(split)
    }

    pub fn model(&self, phase: usize) -> PathBuf {
        self.root.join("models").join(format!("phase{phase}.fcn"))
    }

    pub fn loss_log(&self, phase: usize) -> PathBuf {
        self.root.join("logs").join(format!("phase{phase}_loss.csv"))
    }

    /// Training-set suppression masks used by `phase`, stacked (N, h, w).
    pub fn masks(&self, phase: usize) -> PathBuf {
        self.root.join("masks").join(format!("phase{phase}.tns"))
    }

    pub fn mask_render(&self, phase: usize, image_id: usize) -> PathBuf {
        self.root.join("masks").join(format!("phase{phase}_img_{image_id:05}.pgm"))
    }

    /// `source` is `phaseK` or `fused`.
    pub fn heatmaps(&self, split: &str, source: &str) -> PathBuf {
        self.root.join("heatmaps").join(split).join(format!("{source}.tns"))
    }

    pub fn heatmap_meta(&self, split: &str, source: &str) -> PathBuf {
        self.root.join("heatmaps").join(split).join(format!("{source}.json"))
    }

    pub fn predictions(&self, split: &str, source: &str) -> PathBuf {
        self.root.join("predictions").join(split).join(format!("{source}.json"))
    }

    pub fn cues_dir(&self, split: &str, source: &str) -> PathBuf {
        self.root.join("cues").join(split).join(source)
    }

    pub fn eval_file(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(name)
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    pub fn renders(&self) -> PathBuf {
        self.root.join("renders")
    }
}

pub fn phase_source(phase: usize) -> String {
    format!("phase{phase}")
}
