use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use polyformer::constructor::{build_pipeline, manifest, BuildBudget, Manifest};
use polyformer::harness::{
    check_bounds, load_polynomial, manifest_path, selftest, sweep, sweep_claims, write_sweep_csv,
    Sampler, DEFAULT_SAMPLES, DEFAULT_SEED,
};
use polyformer::networks::{eval_transformer, Network};
use polyformer::polyoracle::decompose;
use polyformer::{Error, Matrix, Result};

#[derive(Parser)]
#[command(name = "polyformer", version, about = "Explicit Transformer weights for column-symmetric polynomials")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Target {
    /// Polynomial file: JSON (by extension) or one `coeff * x[i][j]^e * ...` term per line.
    #[arg(long)]
    poly: PathBuf,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    /// Degree budget; defaults to the degree of the polynomial.
    #[arg(long)]
    s: Option<u32>,
}

#[derive(Args)]
struct Gadget {
    #[arg(long = "N", default_value_t = 4)]
    n_width: usize,
    #[arg(long = "L", default_value_t = 2)]
    l_depth: usize,
}

#[derive(Args)]
struct Sampling {
    #[arg(long, env = "POLYFORMER_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Build the network and write it with its manifest.
    Build {
        #[command(flatten)]
        target: Target,
        #[command(flatten)]
        gadget: Gadget,
        #[arg(long, default_value = "net.json")]
        out: PathBuf,
    },
    /// Evaluate a built network on one d x n input (JSON array of rows).
    Eval {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Measure every error, range, and size claim; exits nonzero on any failure.
    Verify {
        #[command(flatten)]
        target: Target,
        #[command(flatten)]
        gadget: Gadget,
        #[command(flatten)]
        sampling: Sampling,
        /// Emit the report as JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// End-to-end error over a grid of (N, L); writes CSV.
    Sweep {
        #[command(flatten)]
        target: Target,
        #[arg(long = "N-list", value_delimiter = ',', default_values_t = [2usize, 4, 8])]
        n_list: Vec<usize>,
        #[arg(long = "L-list", value_delimiter = ',', default_values_t = [1usize, 2, 3])]
        l_list: Vec<usize>,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the monomial column-symmetric basis coefficients.
    Decompose {
        #[command(flatten)]
        target: Target,
    },
    /// Check the oracle and gadget identities.
    Selftest {
        #[arg(long, env = "POLYFORMER_SEED", default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
}

fn budget(target: &Target, gadget: &Gadget) -> Result<(polyformer::polyoracle::Polynomial, BuildBudget)> {
    let f = load_polynomial(&target.poly, target.d, target.n)?;
    let s = target.s.unwrap_or_else(|| f.degree().max(1));
    let b = BuildBudget::new(f.d(), f.n(), s, gadget.n_width, gadget.l_depth)?;
    Ok((f, b))
}

fn write_json(path: &Path, text: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(text.as_bytes())?;
    w.write_all(b"\n")?;
    Ok(w.flush()?)
}

fn read_input(path: &Path) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Matrix::from_rows(&rows)
}

fn run(cli: Cli) -> Result<bool> {
    let mut out = io::stdout().lock();
    match cli.command {
        Command::Build { target, gadget, out: path } => {
            let (f, b) = budget(&target, &gadget)?;
            let p = build_pipeline(&f, &b)?;
            let m = manifest(&p);
            write_json(&path, &Network::Transformer(p.network).to_json()?)?;
            let mpath = manifest_path(&path);
            write_json(&mpath, &serde_json::to_string_pretty(&m)?)?;
            writeln!(
                out,
                "wrote {} (state {}, width {}, depth {}, params {}) and {}",
                path.display(),
                m.state_dim,
                m.size.width,
                m.size.depth,
                m.size.parameter_count,
                mpath.display()
            )?;
            writeln!(out, "readout cell: row {}, column {}", m.readout.row, m.readout.column + 1)?;
            Ok(true)
        }
        Command::Eval { net, input } => {
            let Network::Transformer(tf) = Network::from_json(&std::fs::read_to_string(&net)?)? else {
                return Err(Error::InvalidNetwork("expected a transformer network".into()));
            };
            let m: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest_path(&net))?)?;
            let x = read_input(&input)?;
            if x.shape() != (m.budget.d(), m.budget.n()) {
                return Err(Error::Layout(format!(
                    "network expects a {}x{} input, got {}x{}",
                    m.budget.d(),
                    m.budget.n(),
                    x.rows(),
                    x.cols()
                )));
            }
            if let Some(v) = x.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Layout(format!("input entry {v} outside [0, 1]")));
            }
            let y = eval_transformer(&tf, &x.pad_cols(m.input_columns).pad_rows(tf.state_dim()))?;
            writeln!(out, "readout: {}", m.readout.read(&y))?;
            let rows: Vec<&[f64]> = (0..y.rows()).map(|i| y.row(i)).collect();
            writeln!(out, "{}", serde_json::to_string(&rows)?)?;
            Ok(true)
        }
        Command::Verify { target, gadget, sampling, json } => {
            let (f, b) = budget(&target, &gadget)?;
            let report = check_bounds(&f, &b, &Sampler::standard(sampling.samples, sampling.seed))?;
            if json {
                writeln!(out, "{}", report.to_json()?)?;
            } else {
                writeln!(out, "{report}")?;
            }
            Ok(report.all_pass())
        }
        Command::Sweep { target, n_list, l_list, sampling, out: path } => {
            let f = load_polynomial(&target.poly, target.d, target.n)?;
            let rows = sweep(&f, &n_list, &l_list, &Sampler::standard(sampling.samples, sampling.seed))?;
            match &path {
                Some(p) => write_sweep_csv(&rows, BufWriter::new(File::create(p)?))?,
                None => write_sweep_csv(&rows, &mut out)?,
            }
            let claims = sweep_claims(&rows);
            let mut err = io::stderr().lock();
            for c in &claims {
                writeln!(err, "{c}")?;
            }
            Ok(claims.iter().all(|c| c.pass))
        }
        Command::Decompose { target } => {
            let f = load_polynomial(&target.poly, target.d, target.n)?;
            for (c, t) in decompose(&f)? {
                writeln!(out, "{c}\t{t}")?;
            }
            Ok(true)
        }
        Command::Selftest { seed } => {
            let claims = selftest(seed)?;
            for c in &claims {
                writeln!(out, "{c}")?;
            }
            Ok(claims.iter().all(|c| c.pass))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        // A closed pipe (`| head`) is the reader's choice, not a failure.
        Err(Error::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
