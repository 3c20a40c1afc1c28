//! Per-case pipeline: phase fields, moduli maps and the feature vector.

use crate::biomech::{local_moduli, phase_field};
use crate::classify::CardiacClass;
use crate::cli_io::PipelineConfig;
use crate::error::Result;
use crate::features::{extract_features, field_magnitude, FeatureVector, FeatureWarning, PhaseMaps};
use crate::propagation::{CineSequence, Phase};

/// Moduli and field-magnitude maps at one phase, with that phase's labels.
pub fn phase_maps(seq: &CineSequence<f64>, phase: Phase, cfg: &PipelineConfig) -> Result<PhaseMaps> {
    let field = phase_field(seq, phase, &cfg.registration)?;
    let moduli = local_moduli(&field, &cfg.registration.material, cfg.moduli_window, cfg.energy_floor)?;
    Ok(PhaseMaps {
        mu: moduli.mu_map,
        kappa: moduli.kappa_map,
        phimag: field_magnitude(&field),
        labels: seq.phase_labels(phase).clone(),
    })
}

/// Register, estimate moduli and extract the 312 features of one case.
pub fn case_features(
    case_id: &str,
    class: CardiacClass,
    seq: &CineSequence<f64>,
    cfg: &PipelineConfig,
) -> Result<(FeatureVector, Vec<FeatureWarning>)> {
    cfg.validate()?;
    let ed = phase_maps(seq, Phase::ED, cfg)?;
    let es = phase_maps(seq, Phase::ES, cfg)?;
    extract_features(case_id, class, &ed, &es)
}
