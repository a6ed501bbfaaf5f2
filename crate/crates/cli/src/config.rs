//! Run configuration: structured text (TOML) with one section per subsystem.
//! Unknown keys are rejected; every default is serialized back into run
//! manifests so a manifest alone reproduces the run.

use fse_recon_core::masking::AcqSpec;
use fse_recon_core::recon::UnrollConfig;
use fse_recon_core::signal_model::SequenceParams;
use fse_recon_core::solvers::FistaConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// K-space noise standard deviation as a fraction of the peak magnitude.
    pub noise_fraction: f64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            seed: 1,
            noise_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceSection {
    pub echo_count: usize,
    pub echo_spacing_ms: f64,
    pub refocus_angle_deg: f64,
    pub excitation_angle_deg: f64,
    pub t1_ms: f64,
}

impl Default for SequenceSection {
    fn default() -> Self {
        Self {
            echo_count: 32,
            echo_spacing_ms: 8.0,
            refocus_angle_deg: 160.0,
            excitation_angle_deg: 90.0,
            t1_ms: 1000.0,
        }
    }
}

impl SequenceSection {
    pub fn params(&self) -> SequenceParams {
        SequenceParams {
            echo_count: self.echo_count,
            echo_spacing_ms: self.echo_spacing_ms,
            refocus_angle_deg: self.refocus_angle_deg,
            excitation_angle_deg: self.excitation_angle_deg,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoilSection {
    pub count: usize,
    pub seed: u64,
}

impl Default for CoilSection {
    fn default() -> Self {
        Self { count: 4, seed: 2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionSection {
    pub lines_per_echo: usize,
    pub center_lines: usize,
    pub seed: u64,
}

impl Default for AcquisitionSection {
    fn default() -> Self {
        Self {
            lines_per_echo: 4,
            center_lines: 2,
            seed: 3,
        }
    }
}

impl AcquisitionSection {
    pub fn spec(&self, echo_count: usize, height: usize) -> AcqSpec {
        AcqSpec {
            echo_count,
            height,
            lines_per_echo: self.lines_per_echo,
            center_lines: self.center_lines,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubspaceSection {
    pub rank: usize,
    /// T2 grid: "clustered" (default) or "log".
    pub t2_grid: String,
}

impl Default for SubspaceSection {
    fn default() -> Self {
        Self {
            rank: 3,
            t2_grid: "clustered".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub phantom: PhantomSection,
    pub sequence: SequenceSection,
    pub coils: CoilSection,
    pub acquisition: AcquisitionSection,
    pub subspace: SubspaceSection,
    pub unroll: UnrollConfig,
    pub fista: FistaConfig,
    /// Repeats per reconstruction command (seeds seed, seed+1, ...).
    pub repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomSection::default(),
            sequence: SequenceSection::default(),
            coils: CoilSection::default(),
            acquisition: AcquisitionSection::default(),
            subspace: SubspaceSection::default(),
            unroll: UnrollConfig::default(),
            fista: FistaConfig::default(),
            repeats: 5,
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))
    }

    pub fn t2_grid(&self) -> Result<Vec<f64>, String> {
        match self.subspace.t2_grid.as_str() {
            "clustered" => Ok(fse_recon_core::signal_model::default_t2_grid()),
            "log" => Ok(fse_recon_core::signal_model::fitting_t2_grid()),
            other => Err(format!("unknown t2_grid {other:?} (use clustered|log)")),
        }
    }
}
