//! Command-line frontend: equivariance checks, cost tables, filter
//! redundancy analysis, training runs, sweeps, and synthetic data
//! generation. One subcommand per workflow; everything is seeded and
//! deterministic.
//!
//! Exit codes: 0 success, 1 tolerance violation, 2 usage error,
//! 3 file/IO problem.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sepgconv::analysis::RedundancyReport;
use sepgconv::cost::network_report;
use sepgconv::data::{load_amat, load_idx, synth_digits, synth_rotated, write_idx, LabeledImageSet};
use sepgconv::group::{permute_group_axis, transform_spatial, GroupKind, GroupSpec};
use sepgconv::layers::{
    gconv_forward, lift_forward, sep_g_forward_efficient, sep_gc_forward_efficient, uniform_symmetric,
    GConvLayer, SepGConvLayerG, SepGConvLayerGC,
};
use sepgconv::ops::Padding;
use sepgconv::train::{
    evaluate, load_checkpoint, sweep_csv, sweep_data_fraction, sweep_width, train,
    ArchitectureConfig, Family, Network, Optimizer, TrainConfig,
};
use sepgconv::{Error, Scalar, Tensor};

#[derive(Parser)]
#[command(
    name = "sepgconv",
    version,
    about = "Group-equivariant separable convolution toolkit",
    after_help = "Set SEPGCONV_THREADS to cap intra-op parallelism (default 1; \
                  results are identical for any setting)."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GroupArg {
    P4,
    P4m,
}

impl GroupArg {
    fn kind(self) -> GroupKind {
        match self {
            GroupArg::P4 => GroupKind::C4,
            GroupArg::P4m => GroupKind::D4,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LayerArg {
    Lift,
    Full,
    G,
    Gc,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepMode {
    Data,
    Width,
}

#[derive(Subcommand)]
enum Cmd {
    /// Verify that transforming the input commutes with each layer type,
    /// printing the max deviation per group element.
    CheckEquivariance {
        #[arg(long, value_enum, default_value_t = GroupArg::P4)]
        group: GroupArg,
        #[arg(long, value_enum, default_value_t = LayerArg::Full)]
        layer: LayerArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
        dtype: DtypeArg,
    },
    /// Per-layer parameter/MAC table for one architecture.
    Cost {
        #[arg(long)]
        arch: String,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value_t = 28)]
        input: usize,
    },
    /// First-principal-component redundancy report for every group
    /// filter bank in a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Center each kernel stack before the decomposition.
        #[arg(long)]
        centered: bool,
    },
    /// Train one network and print its run report.
    Train(TrainArgs),
    /// Train a grid of configurations and print a CSV table.
    Sweep(SweepArgs),
    /// Write a synthesized rotated-digit dataset as IDX files
    /// (train-* and t10k-* pairs).
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    arch: String,
    #[arg(long)]
    width: usize,
    /// Symmetry group for equivariant families.
    #[arg(long, value_enum)]
    group: Option<GroupArg>,
    /// Dataset directory (IDX or rotated-digit amat files) or "synth".
    #[arg(long, default_value = "synth")]
    data: String,
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 50)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
    dtype: DtypeArg,
    /// Directory for init/ and best/ snapshots.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Samples per split when --data synth.
    #[arg(long, default_value_t = 2000)]
    synth_n: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    mode: SweepMode,
    /// Families to sweep (data mode takes several, width mode one).
    #[arg(long, value_delimiter = ',', required = true)]
    arch: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    widths: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    fractions: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 10)]
    width: usize,
    #[arg(long, default_value = "synth")]
    data: String,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 50)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
    dtype: DtypeArg,
    #[arg(long, default_value_t = 2000)]
    synth_n: usize,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::CheckEquivariance { group, layer, seed, dtype } => match dtype {
            DtypeArg::F32 => check_equivariance::<f32>(group.kind(), layer, seed, 1e-4),
            DtypeArg::F64 => check_equivariance::<f64>(group.kind(), layer, seed, 1e-10),
        },
        Cmd::Cost { arch, width, input } => cost_table(&arch, width, input),
        Cmd::Analyze { checkpoint, centered } => analyze(&checkpoint, centered),
        Cmd::Train(args) => match args.dtype {
            DtypeArg::F32 => run_train::<f32>(&args),
            DtypeArg::F64 => run_train::<f64>(&args),
        },
        Cmd::Sweep(args) => match args.dtype {
            DtypeArg::F32 => run_sweep::<f32>(&args),
            DtypeArg::F64 => run_sweep::<f64>(&args),
        },
        Cmd::SynthData { out, n, seed } => synth_data(&out, n, seed),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Io { .. } | Error::DataFile { .. } | Error::Checkpoint(_) => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

/// Max |layer(T_g x) - T'_g layer(x)| for one group element.
fn deviation<T: Scalar>(
    spec: &GroupSpec,
    g: sepgconv::group::GroupElement,
    x: &Tensor<T>,
    y: &Tensor<T>,
    forward: &dyn Fn(&Tensor<T>) -> Result<Tensor<T>, Error>,
    lifted_input: bool,
) -> Result<f64, Error> {
    let tx = if lifted_input {
        permute_group_axis(spec, g, &transform_spatial(spec, g, x)?, x.rank() - 3)?
    } else {
        transform_spatial(spec, g, x)?
    };
    let lhs = forward(&tx)?;
    let rhs = permute_group_axis(spec, g, &transform_spatial(spec, g, y)?, y.rank() - 3)?;
    Ok(lhs.max_abs_diff(&rhs))
}

fn check_equivariance<T: Scalar>(
    kind: GroupKind,
    layer: LayerArg,
    seed: u64,
    tol: f64,
) -> Result<ExitCode, Error> {
    let spec = GroupSpec::new(kind);
    let order = spec.order();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c_in, c_out, side, k) = (3, 4, 11, 3);

    // build the layer and a matching random input [B,C,(G,)H,W]
    let forward: Box<dyn Fn(&Tensor<T>) -> Result<Tensor<T>, Error>>;
    let lifted_input = !matches!(layer, LayerArg::Lift);
    let x: Tensor<T> = if lifted_input {
        uniform_symmetric(&[c_in, order, side, side], 1.0, &mut rng)
    } else {
        uniform_symmetric(&[c_in, side, side], 1.0, &mut rng)
    };
    match layer {
        LayerArg::Lift => {
            let l = GConvLayer::<T>::new_random(spec.clone(), c_out, c_in, 1, k, true, Padding::Same, &mut rng)?;
            forward = Box::new(move |x| lift_forward(&l, x));
        }
        LayerArg::Full => {
            let l =
                GConvLayer::<T>::new_random(spec.clone(), c_out, c_in, order, k, true, Padding::Same, &mut rng)?;
            forward = Box::new(move |x| gconv_forward(&l, x));
        }
        LayerArg::G => {
            let l = SepGConvLayerG::<T>::new_random(spec.clone(), c_out, c_in, k, true, Padding::Same, &mut rng)?;
            forward = Box::new(move |x| sep_g_forward_efficient(&l, x));
        }
        LayerArg::Gc => {
            let l = SepGConvLayerGC::<T>::new_random(spec.clone(), c_out, c_in, k, true, Padding::Same, &mut rng)?;
            forward = Box::new(move |x| sep_gc_forward_efficient(&l, x));
        }
    }

    let y = forward(&x)?;
    let mut worst = 0.0f64;
    for g in spec.elements() {
        let d = deviation(&spec, g, &x, &y, forward.as_ref(), lifted_input)?;
        println!("element {:>2}: max deviation {:.3e}", g.index(), d);
        worst = worst.max(d);
    }
    if worst < tol {
        println!("OK: worst deviation {worst:.3e} < {tol:.1e}");
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("FAIL: worst deviation {worst:.3e} >= {tol:.1e}");
        Ok(ExitCode::from(1))
    }
}

fn arch_config(arch: &str, width: usize, group: Option<GroupArg>) -> Result<ArchitectureConfig, Error> {
    let family = Family::parse(arch)?;
    let mut cfg = ArchitectureConfig::new(family, width)?;
    if let Some(g) = group {
        cfg = cfg.with_group(g.kind())?;
    }
    Ok(cfg)
}

fn cost_table(arch: &str, width: usize, input: usize) -> Result<ExitCode, Error> {
    let cfg = arch_config(arch, width, None)?;
    let plan = cfg.plan(input)?;
    let report = network_report(&plan)?;
    print!("{}", report.to_table(&plan));
    Ok(ExitCode::SUCCESS)
}

fn analyze(dir: &Path, centered: bool) -> Result<ExitCode, Error> {
    // training is f32 by default but checkpoints record their dtype
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", dir.join("manifest.txt").display())))?;
    let f64_ckpt = manifest.lines().any(|l| l.trim() == "dtype=f64");
    let reports = if f64_ckpt {
        let (net, _) = load_checkpoint::<f64>(dir)?;
        bank_reports(&net, centered)?
    } else {
        let (net, _) = load_checkpoint::<f32>(dir)?;
        bank_reports(&net, centered)?
    };
    if reports.is_empty() {
        eprintln!("checkpoint has no group filter banks to analyze");
        return Ok(ExitCode::from(1));
    }
    println!("layer,n,c,ratio");
    for (r, c_in) in &reports {
        for line in r.ratios_csv(*c_in).lines().skip(1) {
            println!("{line}");
        }
    }
    println!();
    println!("layer,bin_lo,bin_hi,count");
    for (r, _) in &reports {
        for line in r.histogram_csv().lines().skip(1) {
            println!("{},{}", r.layer, line);
        }
    }
    println!();
    for (r, _) in &reports {
        println!(
            "# {} mean_ratio={:.4} degenerate_sets={}",
            r.layer, r.mean_ratio, r.degenerate_sets
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn bank_reports<T: Scalar>(
    net: &Network<T>,
    centered: bool,
) -> Result<Vec<(RedundancyReport, usize)>, Error> {
    net.full_filter_banks()
        .into_iter()
        .map(|(name, bank)| {
            let c_in = bank.shape()[1];
            RedundancyReport::measure(&name, bank, centered, 20).map(|r| (r, c_in))
        })
        .collect()
}

/// Load train/test splits from a directory of IDX or amat files, or
/// synthesize a rotated-digit set.
fn load_data(spec: &str, synth_n: usize, seed: u64) -> Result<(LabeledImageSet, LabeledImageSet), Error> {
    if spec == "synth" {
        let train_base = synth_digits(synth_n, seed)?;
        let test_base = synth_digits(synth_n, seed ^ 0x9e3779b97f4a7c15)?;
        let train = synth_rotated(&train_base, seed.wrapping_add(1))?;
        let test = synth_rotated(&test_base, seed.wrapping_add(2))?;
        return Ok((train, test));
    }
    let dir = Path::new(spec);
    let idx_train = dir.join("train-images-idx3-ubyte");
    if idx_train.exists() {
        let train = load_idx(&idx_train, dir.join("train-labels-idx1-ubyte"))?;
        let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
        return Ok((train, test));
    }
    let amat_train = dir.join("mnist_all_rotation_normalized_float_train_valid.amat");
    if amat_train.exists() {
        let train = load_amat(&amat_train)?;
        let test = load_amat(dir.join("mnist_all_rotation_normalized_float_test.amat"))?;
        if train.clamped_values + test.clamped_values > 0 {
            eprintln!(
                "note: clamped {} out-of-range values while reading",
                train.clamped_values + test.clamped_values
            );
        }
        return Ok((train.set, test.set));
    }
    Err(Error::DataFile {
        path: dir.into(),
        reason: "expected train-images-idx3-ubyte (+labels, t10k pair) or \
                 mnist_all_rotation_normalized_float_{train_valid,test}.amat, or \"synth\""
            .into(),
    })
}

fn run_train<T: Scalar>(args: &TrainArgs) -> Result<ExitCode, Error> {
    let cfg = arch_config(&args.arch, args.width, args.group)?;
    let (train_set, test_set) = load_data(&args.data, args.synth_n, args.seed)?;
    let mut tc = TrainConfig::desk(args.seed);
    tc.epochs = args.epochs;
    tc.batch_size = args.batch_size;
    tc.optimizer = Optimizer::adam(args.lr);
    tc.lr_decay_epochs = if args.epochs >= 5 { vec![args.epochs - 1] } else { vec![] };
    tc.fraction = args.fraction;
    tc.checkpoint_dir = args.checkpoint.clone();
    tc.log = true;

    let mut net = Network::<T>::build(&cfg, 28, args.seed)?;
    let report = train(&mut net, &train_set, &test_set, &tc)?;
    let (_, final_err) = evaluate(&net, &test_set)?;
    println!("{}", sepgconv::train::RunReport::csv_header());
    println!("{}", report.csv_row());
    println!(
        "# params={} macs={} best_epoch={} best_test_error={:.2}% final_test_error={:.2}%",
        report.param_count, report.mac_count, report.best_epoch, report.best_test_error_pct, final_err
    );
    if let Some(dir) = &args.checkpoint {
        println!("# checkpoints written under {}", dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn run_sweep<T: Scalar>(args: &SweepArgs) -> Result<ExitCode, Error> {
    let (train_set, test_set) = load_data(&args.data, args.synth_n, args.seeds[0])?;
    let mut base = TrainConfig::desk(0);
    base.epochs = args.epochs;
    base.batch_size = args.batch_size;
    base.optimizer = Optimizer::adam(args.lr);
    base.lr_decay_epochs = if args.epochs >= 5 { vec![args.epochs - 1] } else { vec![] };

    let rows = match args.mode {
        SweepMode::Data => {
            if args.fractions.is_empty() {
                return Err(Error::Invalid("data sweep needs --fractions".into()));
            }
            let archs: Vec<ArchitectureConfig> = args
                .arch
                .iter()
                .map(|a| arch_config(a, args.width, None))
                .collect::<Result<_, _>>()?;
            sweep_data_fraction::<T>(&archs, &args.fractions, &args.seeds, &train_set, &test_set, &base)?
        }
        SweepMode::Width => {
            if args.widths.is_empty() {
                return Err(Error::Invalid("width sweep needs --widths".into()));
            }
            if args.arch.len() != 1 {
                return Err(Error::Invalid("width sweep takes exactly one --arch".into()));
            }
            let family = Family::parse(&args.arch[0])?;
            sweep_width::<T>(family, &args.widths, &args.seeds, &train_set, &test_set, &base)?
        }
    };
    let csv = sweep_csv(&rows);
    match &args.out {
        Some(path) => std::fs::write(path, &csv).map_err(|e| Error::Io { path: path.clone(), source: e })?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn synth_data(out: &Path, n: usize, seed: u64) -> Result<ExitCode, Error> {
    if n == 0 {
        return Err(Error::Invalid("--n must be positive".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.into(), source: e })?;
    let (train, test) = load_data("synth", n, seed)?;
    write_idx(&train, out.join("train-images-idx3-ubyte"), out.join("train-labels-idx1-ubyte"))?;
    write_idx(&test, out.join("t10k-images-idx3-ubyte"), out.join("t10k-labels-idx1-ubyte"))?;
    println!("wrote {} train and {} test samples under {}", train.len(), test.len(), out.display());
    Ok(ExitCode::SUCCESS)
}
