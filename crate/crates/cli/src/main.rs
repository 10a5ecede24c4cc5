//! `cress`: synthetic-corpus generation, training, decoding, scoring and
//! modality-gap analysis from one configuration.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};
use cress_core::experiment::{
    config_defaults, default_checkpoint, default_output_root, gen_data, load_config, manifest_path,
    run_ablate, run_evaluate, run_gap_analyze, run_train, run_translate, ExperimentConfig, Search,
    Source, OUTPUT_ROOT_ENV,
};

const CONFIG_HEADING: &str = "Configuration (file keys; flags override the file)";

fn config_args(cmd: Command) -> Command {
    let cmd = cmd
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("TOML file with dotted keys, e.g. `train.mu = 15`"),
        )
        .arg(
            Arg::new("output-root")
                .long("output-root")
                .value_name("DIR")
                .value_parser(clap::value_parser!(PathBuf))
                .help(format!("Root for default paths [env: {OUTPUT_ROOT_ENV}] [default: runs]")),
        );
    config_defaults().into_iter().fold(cmd, |cmd, (key, default)| {
        cmd.arg(
            Arg::new(key.clone())
                .long(key)
                .value_name("VALUE")
                .help(format!("[default: {default}]"))
                .help_heading(CONFIG_HEADING),
        )
    })
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

fn cli() -> Command {
    let train = Command::new("train")
        .about("Train a model (MTL or CRESS) and write checkpoints plus a metrics log")
        .arg(
            Arg::new("mode")
                .long("mode")
                .value_parser(["mtl", "cress"])
                .help("Shorthand for --train.mode"),
        )
        .arg(
            Arg::new("no-scheduled-sampling")
                .long("no-scheduled-sampling")
                .action(ArgAction::SetTrue)
                .help("Keep gold prefixes (train.scheduled_sampling = false)"),
        )
        .arg(
            Arg::new("no-regularization")
                .long("no-regularization")
                .action(ArgAction::SetTrue)
                .help("Drop the KL term (train.regularization = false)"),
        )
        .arg(
            Arg::new("no-adaptive")
                .long("no-adaptive")
                .action(ArgAction::SetTrue)
                .help("Uniform token weights (train.adaptive = false)"),
        );
    let translate = Command::new("translate")
        .about("Decode a manifest and write one hypothesis per line")
        .arg(path_arg("checkpoint", "Model checkpoint [default: <checkpoint_dir>/averaged.ckpt]"))
        .arg(path_arg("input", "Manifest to translate [default: <corpus_dir>/test.tsv]"))
        .arg(path_arg("output", "Hypothesis file [default: <output_dir>/hypotheses.txt]"))
        .arg(
            Arg::new("source")
                .long("source")
                .value_parser(["speech", "text"])
                .default_value("speech"),
        )
        .arg(
            Arg::new("search")
                .long("search")
                .value_parser(["greedy", "beam"])
                .default_value("beam"),
        );
    let evaluate = Command::new("evaluate")
        .about("Corpus BLEU, BLEU by length and an optional paired bootstrap against a baseline")
        .arg(path_arg("hyps", "Hypothesis file [default: <output_dir>/hypotheses.txt]"))
        .arg(path_arg("refs", "Reference manifest [default: <corpus_dir>/test.tsv]"))
        .arg(path_arg("baseline", "Baseline hypothesis file for the significance test"))
        .arg(
            Arg::new("resamples")
                .long("resamples")
                .value_parser(clap::value_parser!(usize))
                .default_value("1000"),
        );
    let gap = Command::new("gap-analyze")
        .about("Modality-gap records, curves, density, plots and a summary")
        .arg(path_arg("checkpoint", "Model checkpoint [default: <checkpoint_dir>/averaged.ckpt]"))
        .arg(path_arg("input", "Manifest to analyse [default: <corpus_dir>/dev.tsv]"))
        .arg(
            Arg::new("max-step")
                .long("max-step")
                .value_parser(clap::value_parser!(usize))
                .default_value("20")
                .help("Last decoding step included in the trend statistics"),
        );
    let subcommands = [
        Command::new("gen-data").about("Generate the synthetic corpus: manifests, features, vocabulary"),
        train,
        translate,
        evaluate,
        gap,
        Command::new("ablate").about("Train and score all eight on/off combinations of the CRESS components"),
    ];
    Command::new("cress")
        .about("Cross-modal regularized scheduled sampling for speech translation, at desk scale")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands(subcommands.map(config_args))
}

fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = config_defaults()
        .into_iter()
        .filter_map(|(key, _)| m.get_one::<String>(&key).map(|v| (key, v.clone())))
        .collect();
    let has = |id: &str| m.try_get_one::<bool>(id).ok().flatten().copied().unwrap_or(false);
    if let Ok(Some(mode)) = m.try_get_one::<String>("mode") {
        out.push(("train.mode".into(), mode.clone()));
    }
    for (flag, key) in [
        ("no-scheduled-sampling", "train.scheduled_sampling"),
        ("no-regularization", "train.regularization"),
        ("no-adaptive", "train.adaptive"),
    ] {
        if has(flag) {
            out.push((key.into(), "false".into()));
        }
    }
    out
}

fn resolve(m: &ArgMatches) -> Result<ExperimentConfig> {
    let root = m
        .get_one::<PathBuf>("output-root")
        .cloned()
        .unwrap_or_else(default_output_root);
    let file = m.get_one::<PathBuf>("config").map(PathBuf::as_path);
    Ok(load_config(file, &overrides(m), &root)?)
}

fn path_or(m: &ArgMatches, id: &str, default: impl FnOnce() -> PathBuf) -> PathBuf {
    m.get_one::<PathBuf>(id).cloned().unwrap_or_else(default)
}

fn parsed<T: std::str::FromStr<Err = cress_core::Error>>(m: &ArgMatches, id: &str) -> Result<T> {
    let raw = m.get_one::<String>(id).context("missing argument")?;
    Ok(raw.parse()?)
}

fn hypotheses_default(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.output_dir.join("hypotheses.txt")
}

fn run(name: &str, m: &ArgMatches) -> Result<()> {
    let cfg = resolve(m)?;
    match name {
        "gen-data" => {
            for p in gen_data(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
        "train" => {
            let out = run_train(&cfg)?;
            println!(
                "trained {} epochs; best dev BLEU {:.2} at epoch {}; averaged model at {}",
                out.metrics.iter().filter(|m| m.phase == "main").count(),
                out.best_dev_bleu,
                out.best_epoch,
                default_checkpoint(&cfg).display()
            );
        }
        "translate" => {
            let checkpoint = path_or(m, "checkpoint", || default_checkpoint(&cfg));
            let input = path_or(m, "input", || manifest_path(&cfg, "test"));
            let output = path_or(m, "output", || hypotheses_default(&cfg));
            let source: Source = parsed(m, "source")?;
            let search: Search = parsed(m, "search")?;
            let p = run_translate(&cfg, &checkpoint, &input, source, search, &output)?;
            println!("wrote {}", p.display());
        }
        "evaluate" => {
            let hyps = path_or(m, "hyps", || hypotheses_default(&cfg));
            let refs = path_or(m, "refs", || manifest_path(&cfg, "test"));
            let baseline = m.get_one::<PathBuf>("baseline").map(PathBuf::as_path);
            let resamples = *m.get_one::<usize>("resamples").context("missing --resamples")?;
            let r = run_evaluate(&cfg, &hyps, &refs, baseline, resamples)?;
            print!("BLEU {:.2} ({} sentences)", r.bleu, r.sentences);
            if let (Some(b), Some(p)) = (r.baseline_bleu, r.p_value) {
                print!("; baseline {b:.2}; p = {p:.4}");
            }
            println!();
        }
        "gap-analyze" => {
            let checkpoint = path_or(m, "checkpoint", || default_checkpoint(&cfg));
            let input = path_or(m, "input", || manifest_path(&cfg, "dev"));
            let max_step = *m.get_one::<usize>("max-step").context("missing --max-step")?;
            let s = run_gap_analyze(&cfg, &checkpoint, &input, max_step)?;
            println!("mean teacher-forced gap {:.4}", s.mean_teacher_forced_gap);
            for (strategy, rho) in &s.trend {
                println!("spearman(step, gap) {strategy}: {rho:.3}");
            }
        }
        "ablate" => {
            for r in run_ablate(&cfg)? {
                println!(
                    "ss={} reg={} ada={}: test BLEU {:.2}",
                    r.scheduled_sampling, r.regularization, r.adaptive, r.test_bleu
                );
            }
            println!("wrote {}", cfg.paths.output_dir.join("ablation.csv").display());
        }
        other => unreachable!("unhandled subcommand {other}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn dotted_flags_and_shorthands_become_overrides() {
        let m = cli()
            .try_get_matches_from(["cress", "train", "--train.mu", "12", "--mode", "cress", "--no-adaptive"])
            .unwrap();
        let (_, sub) = m.subcommand().unwrap();
        let o = overrides(sub);
        assert!(o.contains(&("train.mu".into(), "12".into())));
        assert!(o.contains(&("train.mode".into(), "cress".into())));
        assert!(o.contains(&("train.adaptive".into(), "false".into())));
    }

    #[test]
    fn unknown_flag_is_rejected() {
        assert!(cli().try_get_matches_from(["cress", "train", "--train.nope", "1"]).is_err());
        assert!(cli().try_get_matches_from(["cress", "frobnicate"]).is_err());
    }
}
