//! TOML run configuration. Every section has defaults, unknown keys are
//! rejected, and the effective section is written back into the manifest.

use std::path::Path;

use frrr::experiments::{MisspecConfig, RateStudyConfig, SamplerSettings};
use frrr::posterior::Algorithm;
use frrr::{DesignMode, FamilySpecF64, TauPreset};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for generate, fit and verify-bounds. The study sections
    /// carry their own seeds.
    pub seed: u64,
    pub generate: GenerateConfig,
    pub fit: FitConfig,
    pub divergence: DivergenceConfig,
    pub verify_bounds: VerifyBoundsConfig,
    pub rate_study: RateStudyConfig,
    pub misspec: MisspecConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            generate: GenerateConfig::default(),
            fit: FitConfig::default(),
            divergence: DivergenceConfig::default(),
            verify_bounds: VerifyBoundsConfig::default(),
            rate_study: RateStudyConfig::default(),
            misspec: MisspecConfig::default(),
        }
    }
}

fn gaussian() -> FamilySpecF64 {
    FamilySpecF64::gaussian(1.0).expect("unit dispersion is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub family: FamilySpecF64,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub rank: usize,
    pub design: DesignMode,
    /// The truth is scaled so that `eta_coverage` of |XB₀| is ≤ `eta_bound`.
    pub eta_bound: f64,
    pub eta_coverage: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            family: gaussian(),
            n: 200,
            p: 4,
            q: 3,
            rank: 2,
            design: DesignMode::Iid,
            eta_bound: 3.0,
            eta_coverage: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub alpha: f64,
    pub tau_preset: TauPreset,
    /// Used only with `tau_preset = "manual"`.
    pub tau: Option<f64>,
    pub sampler: SamplerSettings,
    /// Singular values below this fraction of s₁ do not count toward the
    /// reported effective rank.
    pub rank_threshold: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            alpha: 0.5,
            tau_preset: TauPreset::Theorem1,
            tau: None,
            sampler: SamplerSettings {
                algorithm: Algorithm::Mala,
                n_steps: 20_000,
                burn_in: 4_000,
                thin: 10,
                init_at_mode: false,
                ..SamplerSettings::default()
            },
            rank_threshold: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivergenceConfig {
    pub family: FamilySpecF64,
    pub alphas: Vec<f64>,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        DivergenceConfig { family: gaussian(), alphas: vec![0.25, 0.5, 0.75] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyBoundsConfig {
    pub family: FamilySpecF64,
    pub trials: usize,
}

impl Default for VerifyBoundsConfig {
    fn default() -> Self {
        VerifyBoundsConfig { family: gaussian(), trials: 1000 }
    }
}

fn in_unit_interval(what: &str, a: f64) -> Result<(), CliError> {
    if a > 0.0 && a < 1.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} must lie in (0, 1), got {a}")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.n == 0 || self.p == 0 || self.q == 0 {
            return Err(CliError::Config("n, p and q must be positive".into()));
        }
        if self.rank > self.p.min(self.q) {
            return Err(CliError::Config(format!("rank {} exceeds min(p, q)", self.rank)));
        }
        if !(self.eta_bound > 0.0) {
            return Err(CliError::Config("eta_bound must be positive".into()));
        }
        if !(self.eta_coverage > 0.0 && self.eta_coverage <= 1.0) {
            return Err(CliError::Config("eta_coverage must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        in_unit_interval("alpha", self.alpha)?;
        in_unit_interval("rank_threshold", self.rank_threshold)?;
        in_unit_interval("sampler.target_accept", self.sampler.target_accept)?;
        match (self.tau_preset, self.tau) {
            (TauPreset::Manual, Some(t)) if t > 0.0 && t.is_finite() => {}
            (TauPreset::Manual, _) => {
                return Err(CliError::Config("tau_preset = \"manual\" needs a positive tau".into()))
            }
            (_, Some(_)) => return Err(CliError::Config("tau is only read with tau_preset = \"manual\"".into())),
            (_, None) => {}
        }
        let s = &self.sampler;
        if s.n_steps == 0 || s.thin == 0 || s.burn_in > s.n_steps {
            return Err(CliError::Config("need n_steps > 0, thin > 0 and burn_in ≤ n_steps".into()));
        }
        Ok(())
    }
}

impl DivergenceConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.alphas.is_empty() {
            return Err(CliError::Config("alphas must be nonempty".into()));
        }
        for &a in &self.alphas {
            in_unit_interval("alpha", a)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn edited_config_round_trips() {
        let text = r#"
seed = 9

[fit]
alpha = 0.3
tau_preset = "manual"
tau = 1000.0

[fit.sampler]
algorithm = "ula"
n_steps = 100

[generate.family]
family = "gamma_log"
a = 0.5
k = 2.0
theta_lo = -5.0
theta_hi = -0.2
clip_margin = 0.001
"#;
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.fit.sampler.algorithm, Algorithm::Ula);
        assert_eq!(c.fit.sampler.burn_in, SamplerSettings::default().burn_in);
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_and_invalid_keys_are_rejected() {
        assert!(RunConfig::parse("sede = 3").is_err());
        assert!(RunConfig::parse("[fit]\nalpah = 0.5").is_err());
        // Dispersion of a Bernoulli family is fixed at 1.
        let bad = "[generate.family]\nfamily = \"bernoulli_logit\"\na = 2.0\nk = 1.0\ntheta_lo = -1.0\ntheta_hi = 1.0\nclip_margin = 0.001";
        assert!(RunConfig::parse(bad).is_err());
    }

    #[test]
    fn fit_validation() {
        let mut f = FitConfig::default();
        assert!(f.validate().is_ok());
        f.alpha = 1.0;
        assert!(f.validate().is_err());
        f.alpha = 0.5;
        f.tau_preset = TauPreset::Manual;
        assert!(f.validate().is_err());
        f.tau = Some(2.0);
        assert!(f.validate().is_ok());
    }
}
