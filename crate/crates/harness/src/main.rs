use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lgpe_core::circuit::{
    build_prfsh, builtin_family, check_prf_characterizes_in, check_value_coverage, eval_circuit, src_bruteforce,
    src_upper_bound, BuiltinFamily, QueryDomain,
};
use lgpe_core::pe::{generic_sh_prf, ipe_prf, ipe_sh_prf, standard_prf, Prf, PrfTable, Relation, StandardKind};
use lgpe_core::pola;
use lgpe_core::tasks::{sample_dataset, to_jsonl, TaskKind};
use lgpe_harness::config::ExperimentConfig;
use lgpe_harness::export::{self, ExportFormat};
use lgpe_harness::runner::{self, RunOptions};
use lgpe_harness::{compare_trends, results_root};
use lgpe_transformer::{checkpoint, evaluate_per_scale};

#[derive(Parser)]
#[command(name = "lgpe", about = "Length-generalization experiments with position embeddings")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample task instances as JSON lines.
    Generate {
        #[arg(long)]
        task: TaskKind,
        #[arg(long, default_value = "1-5")]
        scales: String,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        aligned: bool,
        #[arg(long)]
        target_length: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Position-only linear attention experiments.
    Pola {
        #[command(subcommand)]
        cmd: PolaCmd,
    },
    /// Circuit evaluation, PRF characterization and SRC search.
    Circuit {
        #[command(subcommand)]
        cmd: CircuitCmd,
    },
    /// Relation-function tables.
    Prf {
        #[command(subcommand)]
        cmd: PrfCmd,
    },
    /// Train one (PE, seed) pair of an experiment config.
    Train {
        config: PathBuf,
        #[arg(long)]
        pe: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Evaluate a saved checkpoint per scale.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long, default_value = "1-10")]
        scales: String,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        aligned: bool,
        #[arg(long)]
        target_length: Option<usize>,
    },
    /// Run (or resume) every (PE, seed) pair of an experiment.
    Run {
        config: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Trend report over an experiment's records.
    Report { name: String },
    /// Export an experiment's records.
    Export {
        name: String,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Heatmap side length and number of ranks.
        #[arg(long, default_value_t = 20)]
        len: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
}

#[derive(Subcommand)]
enum PolaCmd {
    /// Fit one random non-increasing-LRC target and report LG.
    Demo {
        #[arg(long, default_value_t = 12)]
        n: usize,
        #[arg(long, default_value_t = 6)]
        n0: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Closed form and gradient descent on many non-increasing targets.
    Generalize {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 12)]
        n: usize,
        #[arg(long, default_value_t = 6)]
        n0: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Prefix-built PEs on increasing-LRC targets.
    PrefixFailure {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 12)]
        n: usize,
        #[arg(long, default_value_t = 6)]
        n0: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum CircuitCmd {
    Eval {
        #[arg(long)]
        family: BuiltinFamily,
        /// Digits, e.g. `10110`.
        input: String,
    },
    CheckPrf {
        #[arg(long)]
        family: BuiltinFamily,
        /// ape, rpe, ipe-parity, constant or prfsh.
        #[arg(long)]
        prf: String,
        #[arg(long, default_value_t = 20)]
        n_max: usize,
        #[arg(long)]
        output_steps: bool,
        #[arg(long)]
        coverage: Option<usize>,
    },
    BuildPrfsh {
        #[arg(long)]
        family: BuiltinFamily,
        #[arg(long, default_value_t = 5)]
        n: usize,
    },
    Src {
        #[arg(long)]
        family: Option<BuiltinFamily>,
        /// copy, parity or zeros for the brute force.
        #[arg(long)]
        function: Option<String>,
        #[arg(long, default_value_t = 2)]
        alphabet: u32,
        #[arg(long, default_value_t = 2)]
        n_max: usize,
        #[arg(long, default_value_t = 2)]
        arity_max: usize,
        #[arg(long, default_value_t = 3)]
        ops_max: usize,
    },
}

#[derive(Subcommand)]
enum PrfCmd {
    /// Print a PRF table.
    Table {
        /// rpe, ape, ipe, ipe_sh or generic_sh.
        #[arg(long)]
        pe: String,
        #[arg(long)]
        task: Option<TaskKind>,
        #[arg(long, default_value_t = 10)]
        target_length: usize,
        #[arg(long, default_value_t = 12)]
        len: usize,
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Top-k learned PRF values from an LBPE checkpoint, as JSON.
    Export {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        len: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        scale: Option<usize>,
    },
}

fn parse_range(s: &str) -> Result<std::ops::RangeInclusive<usize>> {
    let (a, b) = s.split_once('-').unwrap_or((s, s));
    Ok(a.trim().parse()?..=b.trim().parse()?)
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ExperimentConfig::from_json(&text)?)
}

fn print_table(t: &PrfTable) {
    println!("{}", t.name);
    for row in &t.rows {
        println!("{}", row.iter().map(|v| format!("{v:>3}")).collect::<String>());
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Generate { task, scales, count, aligned, target_length, seed } => {
            let data = sample_dataset(task, parse_range(&scales)?, count, aligned, target_length, seed)?;
            print!("{}", to_jsonl(&data));
        }
        Cmd::Pola { cmd } => return pola_cmd(cmd),
        Cmd::Circuit { cmd } => return circuit_cmd(cmd),
        Cmd::Prf { cmd } => prf_cmd(cmd)?,
        Cmd::Train { config, pe, seed } => {
            let cfg = load_config(&config)?;
            let spec = cfg.pes.get(pe).ok_or_else(|| anyhow!("config has {} PEs", cfg.pes.len()))?;
            let kind = spec.resolve(&cfg)?;
            let dir = runner::experiment_dir(&results_root(), &cfg);
            fs::create_dir_all(&dir)?;
            let rec = runner::run_one(&cfg, &kind, seed, &dir, &RunOptions::default())?;
            println!("{}", serde_json::to_string_pretty(&rec)?);
        }
        Cmd::Eval { checkpoint: path, task, scales, samples, seed, aligned, target_length } => {
            let (model, _) = checkpoint::load(&path)?;
            let scales: Vec<usize> = parse_range(&scales)?.collect();
            let m = evaluate_per_scale(&model, task, &scales, samples, seed, aligned, target_length)?;
            println!("{}", serde_json::to_string(&m)?);
        }
        Cmd::Run { config, workers } => {
            let cfg = load_config(&config)?;
            let mut opts = RunOptions { verbose: true, ..RunOptions::default() };
            if let Some(w) = workers {
                opts.workers = w;
            }
            let records = runner::run_experiment(&cfg, &results_root(), &opts)?;
            let failed = records.iter().filter(|r| !r.is_complete()).count();
            println!("{} runs, {failed} failed", records.len());
            if let Ok(rep) = compare_trends(&records) {
                println!("{}", serde_json::to_string_pretty(&rep)?);
            }
            return Ok(failed == 0);
        }
        Cmd::Report { name } => {
            let records = runner::load_records(&results_root().join(&name))?;
            println!("{}", serde_json::to_string_pretty(&compare_trends(&records)?)?);
        }
        Cmd::Export { name, format, out, len, k } => {
            let dir = results_root().join(&name);
            let records = runner::load_records(&dir)?;
            let text = match format.parse::<ExportFormat>()? {
                ExportFormat::Csv => export::to_csv(&records)?,
                ExportFormat::Json => export::to_json(&records)?,
                ExportFormat::SvgLinechart => export::svg_linechart(&records),
                ExportFormat::PrfHeatmap => {
                    let mut maps = Vec::new();
                    for r in records.iter().filter(|r| r.pe_kind.is_learned_prf() && r.is_complete()) {
                        maps.extend(export::heatmaps_from_checkpoint(&dir.join(format!("{}.json", r.run_id)), len, k, None)?);
                    }
                    export::heatmap_svg(&maps)
                }
            };
            match out {
                Some(p) => runner::write_atomic(&p, text.as_bytes())?,
                None => print!("{text}"),
            }
        }
    }
    Ok(true)
}

fn pola_cmd(cmd: PolaCmd) -> Result<bool> {
    match cmd {
        PolaCmd::Demo { n, n0, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = pola::random_nonincreasing_target(n, n0, &mut rng);
            let (ok, cf, gd) = generalization_trial(&a, n, n0)?;
            println!("LRC prefix {} / full {}", pola::lrc_of_prefix_function(&a, n0), pola::lrc_of_matrix(&a, pola::DEFAULT_TOL));
            println!("closed form max error {cf:.3e}, gradient descent max error {gd:.3e}");
            Ok(ok)
        }
        PolaCmd::Generalize { trials, n, n0, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut passed = 0;
            for _ in 0..trials {
                let a = pola::random_nonincreasing_target(n, n0, &mut rng);
                passed += usize::from(generalization_trial(&a, n, n0)?.0);
            }
            println!("{passed}/{trials} targets reach exact length generalization");
            Ok(passed == trials)
        }
        PolaCmd::PrefixFailure { trials, n, n0, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut failed = 0;
            for _ in 0..trials {
                let a = pola::random_increasing_target(n, n0, &mut rng);
                let prf = pola::prefix_prf(&a, n0);
                let ind = pola::prf_to_indicators(&prf, n)?;
                let q = pola::min_norm_solution(&a.prefix(n0), &ind)?;
                let rep = pola::verify_lg(&q, &ind, &a, n, pola::DEFAULT_TOL)?;
                failed += usize::from(!rep.exact && rep.witness.is_some_and(|(_, col)| col > n0));
            }
            println!("{failed}/{trials} targets fail with a witness beyond the training prefix");
            Ok(failed == trials)
        }
    }
}

/// Returns (both exact, closed-form error, gradient-descent error).
fn generalization_trial(a: &pola::AttentionMatrix, n: usize, n0: usize) -> Result<(bool, f64, f64)> {
    let prf = pola::nonincreasing_prf(a, n0)?;
    let ind = pola::prf_to_indicators(&prf, n)?;
    let q = pola::min_norm_solution(&a.prefix(n0), &ind)?;
    let cf = pola::verify_lg(&q, &ind, a, n, 1e-8)?;
    let data = pola::PolaDataset::basis(a, n0);
    let lr = pola::default_lr(&data, &ind)?;
    let gd = pola::train_pola_gd(&data, &ind, lr, pola::DEFAULT_GD_STEPS, pola::DEFAULT_GD_TOL)?;
    let gd_rep = pola::verify_lg(&gd.params, &ind, a, n, 1e-4)?;
    Ok((cf.exact && gd_rep.exact, cf.max_error, gd_rep.max_error))
}

fn named_prf(name: &str, n_max: usize) -> Result<Box<dyn Relation>> {
    let len = 2 * n_max + 2;
    Ok(match name {
        "ape" => Box::new(standard_prf(StandardKind::Ape, len)),
        "rpe" => Box::new(standard_prf(StandardKind::Rpe, len)),
        "ipe-parity" => Box::new(ipe_prf(TaskKind::Parity, n_max)?),
        "constant" => Box::new(Prf::new("constant", 2, |_, _| 1)),
        other => bail!("unknown PRF `{other}`"),
    })
}

fn circuit_cmd(cmd: CircuitCmd) -> Result<bool> {
    match cmd {
        CircuitCmd::Eval { family, input } => {
            let x: Vec<u32> = input
                .chars()
                .map(|c| c.to_digit(10).ok_or_else(|| anyhow!("`{c}` is not a digit")))
                .collect::<Result<_>>()?;
            let f = builtin_family(family, x.len().max(2));
            let y = eval_circuit(&f, &x)?;
            println!("{}", y.iter().map(|d| d.to_string()).collect::<String>());
        }
        CircuitCmd::CheckPrf { family, prf, n_max, output_steps, coverage } => {
            let f = builtin_family(family, n_max);
            let rel: Box<dyn Relation> = if prf == "prfsh" { Box::new(build_prfsh(&f)) } else { named_prf(&prf, n_max)? };
            let domain = if output_steps { QueryDomain::OutputSteps } else { QueryDomain::AllPositions };
            let rep = check_prf_characterizes_in(rel.as_ref(), &f, n_max, domain);
            println!("{}", serde_json::to_string_pretty(&rep)?);
            let mut ok = rep.consistent && rep.distinct;
            if let Some(train) = coverage {
                let cov = check_value_coverage(rel.as_ref(), &f, train, n_max);
                println!("{}", serde_json::to_string(&cov)?);
                ok &= cov.covered;
            }
            return Ok(ok);
        }
        CircuitCmd::BuildPrfsh { family, n } => {
            let f = builtin_family(family, n);
            let prf = build_prfsh(&f);
            let len = f.circuit(n).map_or(2 * n, |c| c.max_position());
            // Circuit positions are 1-based; table rows are query positions.
            print_table(&prf.table(len, n));
        }
        CircuitCmd::Src { family, function, alphabet, n_max, arity_max, ops_max } => {
            if let Some(kind) = family {
                println!("upper bound {}", src_upper_bound(&builtin_family(kind, n_max)));
            }
            if let Some(name) = function {
                let f: Box<dyn Fn(&[u32]) -> Vec<u32>> = match name.as_str() {
                    "copy" => Box::new(|x: &[u32]| x.to_vec()),
                    "parity" => Box::new(|x: &[u32]| {
                        x.iter().scan(0, |a, &b| {
                            *a ^= b;
                            Some(*a)
                        }).collect()
                    }),
                    "zeros" => Box::new(|x: &[u32]| vec![0; x.len()]),
                    other => bail!("unknown function `{other}`"),
                };
                match src_bruteforce(f.as_ref(), alphabet, n_max, arity_max, ops_max)? {
                    Some(k) => println!("SRC = {k}"),
                    None => println!("SRC > {ops_max}"),
                }
            }
        }
    }
    Ok(true)
}

fn prf_cmd(cmd: PrfCmd) -> Result<()> {
    match cmd {
        PrfCmd::Table { pe, task, target_length, len, scale, k } => {
            let need_task = || task.ok_or_else(|| anyhow!("--task is required for {pe}"));
            let need_scale = || scale.ok_or_else(|| anyhow!("--scale is required for {pe}"));
            let table = match pe.as_str() {
                "rpe" => standard_prf(StandardKind::Rpe, len).table(len),
                "ape" => standard_prf(StandardKind::Ape, len).table(len),
                "ipe" => ipe_prf(need_task()?, target_length)?.table(len),
                "ipe_sh" => ipe_sh_prf(need_task()?)?.table(len, need_scale()?),
                "generic_sh" => generic_sh_prf(k, len).table(len, need_scale()?),
                other => bail!("unknown PE `{other}`"),
            };
            print_table(&table);
        }
        PrfCmd::Export { checkpoint, len, k, scale } => {
            let maps = export::heatmaps_from_checkpoint(&checkpoint, len, k, scale)?;
            println!("{}", serde_json::to_string_pretty(&maps)?);
        }
    }
    Ok(())
}
