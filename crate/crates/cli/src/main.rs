use std::path::PathBuf;

use clap::Parser;
use vlf_cli::{FeedbackSetting, Overrides, Verb};

/// Train and evaluate learned variable-length feedback codes.
#[derive(Parser, Debug)]
#[command(name = "vlf", version)]
struct Args {
    /// train | eval | sweep | dynamics | gradcheck (may instead come from the config file)
    #[arg(value_enum)]
    verb: Option<Verb>,
    /// TOML config file; unknown keys are errors
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset: paper-R, paper-T, desk-R, desk-T
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Input checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Forward SNR in dB
    #[arg(long = "eta-f", allow_hyphen_values = true)]
    eta_f: Option<f64>,
    /// Feedback SNR in dB, or "noiseless"
    #[arg(long = "eta-b", value_parser = FeedbackSetting::parse_flag, allow_hyphen_values = true)]
    eta_b: Option<FeedbackSetting>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long = "gamma-t")]
    gamma_t: Option<f64>,
    /// Evaluation sessions per operating point
    #[arg(long)]
    sessions: Option<usize>,
}

fn main() {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let flags = Overrides {
        verb: args.verb,
        preset: args.preset,
        seed: args.seed,
        checkpoint: args.checkpoint,
        out_dir: args.out,
        eta_f_db: args.eta_f,
        eta_b_db: args.eta_b,
        gamma: args.gamma,
        gamma_t: args.gamma_t,
        sessions: args.sessions,
    };
    std::process::exit(vlf_cli::main_with(args.config.as_deref(), &flags));
}
