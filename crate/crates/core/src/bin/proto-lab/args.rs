use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use proto_lab::attack::{MaskMode, SourceRule};
use proto_lab::protopnet::DistanceMode;
use proto_lab::training::Regime;

#[derive(Parser, Debug)]
#[command(name = "proto-lab", version, about = "Prototype-similarity network lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate the synthetic dataset, optionally with codec-corrupted classes.
    GenData(GenDataArgs),
    /// Run the full training schedule and write a checkpoint.
    Train(TrainArgs),
    /// Location-shift attack on one image and prototype, with overlays.
    Attack(AttackArgs),
    /// Susceptibility rate of one or more checkpoints.
    Susceptibility(SusceptibilityArgs),
    /// Compressed-versus-clean similarity consistency experiment.
    JpegExp(JpegExpArgs),
    /// Finite-difference check of every differentiable primitive.
    Gradcheck(GradcheckArgs),
    /// Re-run the command recorded in a run manifest into a new directory.
    Replay(ReplayArgs),
}

/// Accepts `0.0314` or `8/255`.
pub fn parse_fraction(s: &str) -> Result<f64, String> {
    let value = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("{s}: {e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("{s}: {e}"))?;
            a / b
        }
        None => s.trim().parse().map_err(|e| format!("{s}: {e}"))?,
    };
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(format!("{s}: expected a non-negative number"))
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 160)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 40)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0.12)]
    pub noise: f64,
    #[arg(long, default_value_t = 8)]
    pub glyph_min: usize,
    #[arg(long, default_value_t = 11)]
    pub glyph_max: usize,
    /// Fraction of classes passed through the codec (e.g. 0.5).
    #[arg(long)]
    pub corrupt_fraction: Option<f64>,
    #[arg(long, default_value_t = 20)]
    pub corrupt_quality: u8,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeArg {
    Standard,
    Adv,
    JpegAug,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Standard => Regime::Standard,
            RegimeArg::Adv => Regime::Adv,
            RegimeArg::JpegAug => Regime::JpegAug,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceArg {
    Squared,
    Euclidean,
}

impl From<DistanceArg> for DistanceMode {
    fn from(d: DistanceArg) -> Self {
        match d {
            DistanceArg::Squared => DistanceMode::Squared,
            DistanceArg::Euclidean => DistanceMode::Euclidean,
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = RegimeArg::Standard)]
    pub regime: RegimeArg,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Overrides the regime's warmup epochs.
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// Overrides the regime's joint epochs.
    #[arg(long)]
    pub joint_epochs: Option<usize>,
    #[arg(long)]
    pub last_layer_iters: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub prototypes_per_class: usize,
    #[arg(long, value_enum, default_value_t = DistanceArg::Squared)]
    pub distance: DistanceArg,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskArg {
    ReceptiveField,
    FullImage,
}

impl From<MaskArg> for MaskMode {
    fn from(m: MaskArg) -> Self {
        match m {
            MaskArg::ReceptiveField => MaskMode::ReceptiveField,
            MaskArg::FullImage => MaskMode::FullImage,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceArg {
    ArgmaxTies,
    TopN,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetArg {
    /// The latent cell farthest from the source set.
    FarCorner,
    /// Every cell outside the source set.
    Complement,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct PgdArgs {
    /// L∞ budget, as a number or a fraction such as 8/255.
    #[arg(long, value_parser = parse_fraction, default_value = "8/255")]
    pub budget: f64,
    #[arg(long, value_parser = parse_fraction, default_value = "2/255")]
    pub step: f64,
    #[arg(long, default_value_t = 40)]
    pub iterations: usize,
    #[arg(long, value_enum, default_value_t = MaskArg::ReceptiveField)]
    pub mask_mode: MaskArg,
    #[arg(long, value_enum, default_value_t = SourceArg::ArgmaxTies)]
    pub source_rule: SourceArg,
    /// Cells kept by `--source-rule top-n`.
    #[arg(long, default_value_t = 3)]
    pub top_n: usize,
}

impl PgdArgs {
    pub fn attack_config(&self) -> proto_lab::attack::AttackConfig {
        proto_lab::attack::AttackConfig {
            budget: self.budget,
            step: self.step,
            iterations: self.iterations,
            mask_mode: self.mask_mode.into(),
            source_rule: match self.source_rule {
                SourceArg::ArgmaxTies => SourceRule::ArgmaxTies,
                SourceArg::TopN => SourceRule::TopN(self.top_n),
            },
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct AttackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub image_id: usize,
    /// Prototype to attack; defaults to the highest pooled score.
    #[arg(long)]
    pub prototype: Option<usize>,
    #[arg(long, value_enum, default_value_t = TargetArg::FarCorner)]
    pub target: TargetArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub pgd: PgdArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct SusceptibilityArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoints to evaluate, one CSV row each. The image set is drawn
    /// from the first and shared by the rest.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Prototypes attacked per image.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 50)]
    pub images: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Skip the PGD adversarial-accuracy column.
    #[arg(long)]
    pub no_adv_eval: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub pgd: PgdArgs,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct JpegExpArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub quality: u8,
    /// Disable 4:2:0 chroma subsampling.
    #[arg(long)]
    pub no_subsampling: bool,
    /// Prototypes per histogram.
    #[arg(long, default_value_t = 75)]
    pub n: usize,
    /// Images (largest drops first) that get histogram charts.
    #[arg(long, default_value_t = 3)]
    pub examples: usize,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// Test hook: corrupt the analytic gradient of the named check.
    #[arg(long)]
    pub inject_fault: Option<String>,
    /// Directory for the JSON report and run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Attack(_) => "attack",
            Command::Susceptibility(_) => "susceptibility",
            Command::JpegExp(_) => "jpeg-exp",
            Command::Gradcheck(_) => "gradcheck",
            Command::Replay(_) => "replay",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Command::GenData(a) => Some(a.seed),
            Command::Train(a) => Some(a.seed),
            Command::Susceptibility(a) => Some(a.seed),
            _ => None,
        }
    }

    /// Redirects the command's output directory.
    pub fn with_out(mut self, out: PathBuf) -> Self {
        match &mut self {
            Command::GenData(a) => a.out = out,
            Command::Train(a) => a.out = out,
            Command::Attack(a) => a.out = out,
            Command::Susceptibility(a) => a.out = out,
            Command::JpegExp(a) => a.out = out,
            Command::Gradcheck(a) => a.out = Some(out),
            Command::Replay(a) => a.out = out,
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fractions() {
        assert_eq!(parse_fraction("8/255").unwrap(), 8.0 / 255.0);
        assert_eq!(parse_fraction("0.5").unwrap(), 0.5);
        assert!(parse_fraction("-1").is_err());
        assert!(parse_fraction("a/2").is_err());
    }
}
