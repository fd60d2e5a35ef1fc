use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use suap_cli::{commands, CliError, EvalInput, Method, Overrides, RunConfig};
use suap_core::report;

#[derive(Parser)]
#[command(name = "suap", version, about = "Structured universal adversarial perturbations for frame sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// INI config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    /// Iterations of the selected solver.
    #[arg(long)]
    iters: Option<usize>,
    /// Singular values kept per AO-Exp step: a count or `full`.
    #[arg(long)]
    top_k: Option<String>,
    #[arg(long)]
    rank_frac: Option<f64>,
    /// Per-channel nuclear budget for lora-pgd, or `inf`.
    #[arg(long)]
    nuclear_budget: Option<String>,
    /// Nuclear-ball radius for fw-nucl.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Read frames from this directory instead of generating a scene.
    #[arg(long)]
    frames_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn load(self) -> Result<RunConfig, CliError> {
        let o = Overrides {
            method: self.method,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            iters: self.iters,
            top_k: self.top_k,
            rank_frac: self.rank_frac,
            nuclear_budget: self.nuclear_budget,
            epsilon: self.epsilon,
            frames_dir: self.frames_dir,
            out: self.out,
            seed: self.seed,
        };
        RunConfig::load(self.config.as_deref(), &o)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene to PNG frames plus truth.csv.
    GenScene(RunArgs),
    /// Optimize a universal perturbation against the detector.
    Attack(RunArgs),
    /// Run the detector and write detections.csv.
    Detect(RunArgs),
    /// Score a perturbation tensor or a directory of adversarial frames.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        delta: Option<PathBuf>,
        #[arg(long)]
        adv_dir: Option<PathBuf>,
    },
    /// Rank methods across two or more report CSVs.
    Compare {
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "compare")]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenScene(args) => {
            let rc = args.load()?;
            let files = commands::cmd_gen_scene(&rc)?;
            println!("wrote {} frames to {}", files.len(), rc.out.display());
        }
        Command::Attack(args) => {
            let rc = args.load()?;
            let run = commands::cmd_attack(&rc)?;
            print!("{}", report::summary_text(&run.report));
            println!("outputs in {}", rc.out.display());
        }
        Command::Detect(args) => {
            let rc = args.load()?;
            let dets = commands::cmd_detect(&rc)?;
            for (b, d) in dets.iter().enumerate() {
                println!("frame {b}: {} detections", d.len());
            }
        }
        Command::Eval { run, delta, adv_dir } => {
            let input = EvalInput::from_flags(delta, adv_dir)?;
            let rc = run.load()?;
            let rep = commands::cmd_eval(&rc, &input)?;
            print!("{}", report::summary_text(&rep));
        }
        Command::Compare { reports, out } => {
            let cmp = commands::cmd_compare(&reports, &out)?;
            print!("{}", cmp.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
