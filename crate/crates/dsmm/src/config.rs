//! TOML training configuration.
//!
//! Every key is optional and falls back to the [`TrainConfig`] default.
//! Unknown keys are rejected. Example:
//!
//! ```toml
//! block_size = 8
//! sampling_ratio = 0.25
//! alpha = 0.2
//! patch_size = 32
//! batch_size = 8
//! epochs = 5
//! iters_per_epoch = 100
//! momentum = 0.9
//! weight_decay = 1e-4
//! decay_sampling = true
//! decay_recon = true
//! seed = 0
//! scale_range = [0.8, 1.2]
//! hflip_prob = 0.5
//! loss_divisor = "batch"        # or "batch_pixels"
//! residual = true
//! stack_width = 64
//! checkpoint_every = 10
//!
//! [lr_schedule]
//! phase1_epochs = 30
//! phase1_rate = 1e-3
//! phase2_epochs = 40
//! phase2_start = 1e-4
//! phase2_end = 1e-6
//! phase3_rate = 1e-6
//! decline = "geometric"         # or "linear"
//! ```

use std::path::Path;

use dsmm_core::train::{Decline, LossDivisor, LrSchedule, TrainConfig};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Deserialize, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum DeclineKey {
    Geometric,
    Linear,
}

#[derive(Debug, Deserialize, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum DivisorKey {
    Batch,
    BatchPixels,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleFile {
    phase1_epochs: Option<usize>,
    phase1_rate: Option<f64>,
    phase2_epochs: Option<usize>,
    phase2_start: Option<f64>,
    phase2_end: Option<f64>,
    phase3_rate: Option<f64>,
    decline: Option<DeclineKey>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    block_size: Option<usize>,
    sampling_ratio: Option<f64>,
    alpha: Option<f64>,
    patch_size: Option<usize>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    iters_per_epoch: Option<usize>,
    momentum: Option<f64>,
    weight_decay: Option<f64>,
    decay_sampling: Option<bool>,
    decay_recon: Option<bool>,
    seed: Option<u64>,
    scale_range: Option<[f64; 2]>,
    hflip_prob: Option<f64>,
    loss_divisor: Option<DivisorKey>,
    residual: Option<bool>,
    stack_width: Option<usize>,
    checkpoint_every: Option<usize>,
    lr_schedule: Option<ScheduleFile>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Parse and validate; errors name the offending field.
pub fn parse_config(text: &str) -> CliResult<TrainConfig> {
    let f: ConfigFile = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
    let mut c = TrainConfig::default();
    set(&mut c.block_size, f.block_size);
    set(&mut c.sampling_ratio, f.sampling_ratio);
    set(&mut c.alpha, f.alpha);
    set(&mut c.patch_size, f.patch_size);
    set(&mut c.batch_size, f.batch_size);
    set(&mut c.epochs, f.epochs);
    set(&mut c.iters_per_epoch, f.iters_per_epoch);
    set(&mut c.momentum, f.momentum);
    set(&mut c.weight_decay, f.weight_decay);
    set(&mut c.decay_sampling, f.decay_sampling);
    set(&mut c.decay_recon, f.decay_recon);
    set(&mut c.seed, f.seed);
    set(&mut c.scale_range, f.scale_range.map(|[a, b]| (a, b)));
    set(&mut c.hflip_prob, f.hflip_prob);
    set(
        &mut c.loss_divisor,
        f.loss_divisor.map(|d| match d {
            DivisorKey::Batch => LossDivisor::Batch,
            DivisorKey::BatchPixels => LossDivisor::BatchPixels,
        }),
    );
    set(&mut c.residual, f.residual);
    set(&mut c.stack_width, f.stack_width);
    set(&mut c.checkpoint_every, f.checkpoint_every);
    if let Some(s) = f.lr_schedule {
        let l: &mut LrSchedule = &mut c.lr_schedule;
        set(&mut l.phase1_epochs, s.phase1_epochs);
        set(&mut l.phase1_rate, s.phase1_rate);
        set(&mut l.phase2_epochs, s.phase2_epochs);
        set(&mut l.phase2_start, s.phase2_start);
        set(&mut l.phase2_end, s.phase2_end);
        set(&mut l.phase3_rate, s.phase3_rate);
        set(
            &mut l.decline,
            s.decline.map(|d| match d {
                DeclineKey::Geometric => Decline::Geometric,
                DeclineKey::Linear => Decline::Linear,
            }),
        );
    }
    c.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(c)
}

pub fn load_config(path: &Path) -> CliResult<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn documented_example_parses() {
        let doc = include_str!("config.rs")
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start())
            .collect::<Vec<_>>()
            .join("\n");
        let c = parse_config(&doc).unwrap();
        assert_eq!(c.block_size, 8);
        assert_eq!(c.measurements().unwrap(), 16);
        assert_eq!(c.lr_schedule.decline, Decline::Geometric);
        assert_eq!(c.loss_divisor, LossDivisor::Batch);
    }

    #[test]
    fn errors_name_the_field() {
        let e = parse_config("alpha = 1.5").unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("alpha"), "{e}");
        let e = parse_config("patch_size = 30\nblock_size = 8").unwrap_err();
        assert!(e.to_string().contains("patch_size"), "{e}");
        let e = parse_config("bogus = 1").unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = parse_config("loss_divisor = \"pixels\"").unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let e = parse_config("[lr_schedule]\nphase1_rate = -1.0").unwrap_err();
        assert!(e.to_string().contains("rate"), "{e}");
    }
}
