use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;

use xdcnn_core::autodiff::gradcheck::run_suite;
use xdcnn_core::error::{Error, Result};
use xdcnn_core::hsdata::{band_reduce, default_synth_spec, load_cube, save_cube, save_labels, synth_generate, HyperCube};
use xdcnn_core::sampler::{split_train_test, Split};
use xdcnn_core::traineval::{
    evaluate, export_history, predict_map as infer_map, save_report, train as train_net, write_pgm,
    write_ppm, EvalReport, TrainConfig,
};
use xdcnn_core::xnet::{load_checkpoint, save_checkpoint, CrossDomainNet};

use crate::config::{load_experiment, DomainEntry, Experiment, ExperimentConfig, LoadedDomain};

#[derive(Args)]
pub struct SynthArgs {
    /// Directory for the cubes, labels, and experiment config
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of domains drawn from one shared material pool
    #[arg(long, value_name = "N", default_value_t = 3)]
    pub domains: usize,
    #[arg(long, value_name = "S", default_value_t = 0)]
    pub seed: u64,
    /// Image size as HxW
    #[arg(long, value_name = "HxW", default_value = "64x64")]
    pub size: String,
    /// Comma-separated band count per domain (surplus entries ignored)
    #[arg(long, value_name = "LIST", default_value = "20,24,12")]
    pub bands: String,
    /// Comma-separated class count per domain (surplus entries ignored)
    #[arg(long, value_name = "LIST", default_value = "4,4,4")]
    pub classes: String,
    /// Spectral noise sigma; defaults to the generator's standard level
    #[arg(long, value_name = "SIGMA")]
    pub noise: Option<f64>,
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let parse = |t: &str| {
        t.parse::<usize>()
            .map_err(|_| Error::Invalid(format!("bad size component {t:?}")))
    };
    match s.split_once('x') {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => Err(Error::Invalid(format!("size must look like 64x64, got {s:?}"))),
    }
}

fn parse_counts(s: &str, n: usize, what: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for t in s.split(',') {
        out.push(
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Invalid(format!("bad count {t:?} in {what}")))?,
        );
    }
    if out.len() < n {
        return Err(Error::Invalid(format!("{what} lists {} entries for {n} domains", out.len())));
    }
    out.truncate(n);
    Ok(out)
}

pub fn synth(args: SynthArgs) -> Result<u8> {
    let mut spec = default_synth_spec(args.seed);
    spec.n_domains = args.domains;
    spec.image_size = parse_size(&args.size)?;
    spec.bands_per_domain = parse_counts(&args.bands, args.domains, "--bands")?;
    spec.classes_per_domain = parse_counts(&args.classes, args.domains, "--classes")?;
    if let Some(sigma) = args.noise {
        spec.noise_sigma = sigma;
    }
    let generated = synth_generate(&spec)?;
    fs::create_dir_all(&args.out)?;
    let mut entries = Vec::new();
    for (cube, labels, dspec) in &generated {
        let cube_name = format!("{}.cube.json", dspec.name);
        let labels_name = format!("{}.labels.json", dspec.name);
        save_cube(cube, &args.out.join(&cube_name))?;
        save_labels(labels, &dspec.class_names, &args.out.join(&labels_name))?;
        println!(
            "wrote {} ({} bands, {} classes, {}x{})",
            args.out.join(&cube_name).display(),
            dspec.bands,
            dspec.classes(),
            cube.height(),
            cube.width()
        );
        entries.push(DomainEntry {
            name: dspec.name.clone(),
            cube_path: cube_name,
            labels_path: labels_name,
            band_keep_path: None,
            per_class: 20,
        });
    }
    let config = ExperimentConfig {
        domains: entries,
        train: TrainConfig {
            seed: args.seed,
            ..TrainConfig::default()
        },
        output_dir: ".".into(),
    };
    let path = args.out.join("config.json");
    let mut text = serde_json::to_string_pretty(&config)?;
    text.push('\n');
    fs::write(&path, text)?;
    println!("wrote {}", path.display());
    Ok(0)
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    /// Train one named domain on its own instead of the full net
    #[arg(long, value_name = "DOMAIN")]
    pub individual: Option<String>,
    /// Checkpoint to write
    #[arg(long, value_name = "CKPT")]
    pub out: PathBuf,
    /// Loss history CSV to write
    #[arg(long, value_name = "CSV")]
    pub log: PathBuf,
    /// Override the configured iteration count (0 audits the initialization)
    #[arg(long, value_name = "K")]
    pub iters: Option<usize>,
    /// Override the configured seed
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
}

fn make_splits(domains: &[LoadedDomain], seed: u64) -> Result<Vec<Split>> {
    domains
        .iter()
        .map(|d| split_train_test(&d.labels, &d.spec.class_names, d.per_class, seed))
        .collect()
}

pub fn train(args: TrainArgs) -> Result<u8> {
    let mut exp = load_experiment(&args.config)?;
    if let Some(k) = args.iters {
        exp.config.train.iterations = k;
    }
    if let Some(s) = args.seed {
        exp.config.train.seed = s;
    }
    if let Some(name) = &args.individual {
        let idx = exp
            .domains
            .iter()
            .position(|d| d.spec.name == *name)
            .ok_or_else(|| Error::UnknownDomain(name.clone()))?;
        exp.domains = vec![exp.domains.swap_remove(idx)];
    }
    let cfg = exp.config.train.clone();
    let specs: Vec<_> = exp.domains.iter().map(|d| d.spec.clone()).collect();
    let splits = make_splits(&exp.domains, cfg.seed)?;
    let mut net = CrossDomainNet::build(&specs, cfg.seed)?;
    let cubes: Vec<&HyperCube> = exp.domains.iter().map(|d| &d.cube).collect();
    let history = train_net(&mut net, &cubes, &splits, &cfg)?;
    save_checkpoint(&net, &args.out)?;
    export_history(&history, &args.log)?;
    for (d, spec) in specs.iter().enumerate() {
        match history.rows.iter().rev().find(|r| r.domain == d) {
            Some(row) => println!(
                "{}: final training loss {:.4} at iteration {}",
                spec.name, row.loss, row.iteration
            ),
            None => println!("{}: initialized, no iterations run", spec.name),
        }
    }
    println!("checkpoint {}", args.out.display());
    println!("history {}", args.log.display());
    Ok(0)
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    /// Restrict evaluation to one domain
    #[arg(long, value_name = "NAME")]
    pub domain: Option<String>,
    /// Report path; default is <output_dir>/<domain>.report.json. With
    /// several domains the domain name is appended to the stem.
    #[arg(long, value_name = "JSON")]
    pub report: Option<PathBuf>,
    /// Individually trained checkpoint(s) for an Individual/Gain comparison
    #[arg(long, value_name = "CKPT")]
    pub baseline: Vec<PathBuf>,
}

fn eval_domain(net: &CrossDomainNet, name: &str, exp: &Experiment) -> Result<EvalReport> {
    let idx = net.domain_index(name)?;
    let dom = exp
        .domains
        .iter()
        .find(|d| d.spec.name == name)
        .ok_or_else(|| Error::UnknownDomain(format!("{name} (not in the config)")))?;
    let spec = &net.specs()[idx];
    if spec.bands != dom.spec.bands || spec.class_names != dom.spec.class_names {
        return Err(Error::Invalid(format!(
            "checkpoint domain {name} does not match the configured dataset"
        )));
    }
    let split = split_train_test(
        &dom.labels,
        &dom.spec.class_names,
        dom.per_class,
        exp.config.train.seed,
    )?;
    evaluate(net, idx, &dom.cube, &split)
}

fn report_path(requested: Option<&Path>, out_dir: &Path, domain: &str, multi: bool) -> PathBuf {
    match requested {
        None => out_dir.join(format!("{domain}.report.json")),
        Some(p) if !multi => p.to_path_buf(),
        Some(p) => {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
            let ext = p.extension().and_then(|s| s.to_str()).unwrap_or("json");
            p.with_file_name(format!("{stem}-{domain}.{ext}"))
        }
    }
}

pub fn eval(args: EvalArgs) -> Result<u8> {
    let exp = load_experiment(&args.config)?;
    let net = load_checkpoint(&args.ckpt)?;
    let names: Vec<String> = match &args.domain {
        Some(n) => {
            net.domain_index(n)?;
            vec![n.clone()]
        }
        None => net.specs().iter().map(|s| s.name.clone()).collect(),
    };
    fs::create_dir_all(&exp.output_dir)?;
    let mut cross = Vec::new();
    for name in &names {
        let report = eval_domain(&net, name, &exp)?;
        let path = report_path(args.report.as_deref(), &exp.output_dir, name, names.len() > 1);
        let dom = exp.domains.iter().find(|d| d.spec.name == *name).unwrap();
        save_report(&report, &dom.spec.class_names, &path)?;
        cross.push((name.clone(), report.overall_accuracy));
        println!("report {}", path.display());
    }
    let mut individual = BTreeMap::new();
    for path in &args.baseline {
        let bnet = load_checkpoint(path)?;
        for spec in bnet.specs() {
            if names.iter().any(|n| n == &spec.name) {
                let report = eval_domain(&bnet, &spec.name, &exp)?;
                individual.insert(spec.name.clone(), report.overall_accuracy);
            }
        }
    }
    println!();
    if args.baseline.is_empty() {
        println!("{:<20} {:>8}", "Domain", "OA");
        for (name, oa) in &cross {
            println!("{name:<20} {oa:>8.3}");
        }
        if cross.len() > 1 {
            let mean = cross.iter().map(|(_, oa)| oa).sum::<f64>() / cross.len() as f64;
            println!("{:<20} {mean:>8.3}", "mean");
        }
    } else {
        println!(
            "{:<20} {:>12} {:>14} {:>8}",
            "Domain", "Individual", "Cross-Domain", "Gain"
        );
        let mut pairs = Vec::new();
        for (name, oa) in &cross {
            match individual.get(name) {
                Some(&ind) => {
                    println!("{name:<20} {ind:>12.3} {oa:>14.3} {:>+8.3}", oa - ind);
                    pairs.push((ind, *oa));
                }
                None => println!("{name:<20} {:>12} {oa:>14.3} {:>8}", "-", "-"),
            }
        }
        if pairs.len() > 1 {
            let n = pairs.len() as f64;
            let ind = pairs.iter().map(|(i, _)| i).sum::<f64>() / n;
            let crs = pairs.iter().map(|(_, c)| c).sum::<f64>() / n;
            println!("{:<20} {ind:>12.3} {crs:>14.3} {:>+8.3}", "mean", crs - ind);
        }
    }
    Ok(0)
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, value_name = "S", default_value_t = 0)]
    pub seed: u64,
}

pub fn gradcheck(args: GradcheckArgs) -> Result<u8> {
    let report = run_suite(args.seed, 5)?;
    println!("gradient check over {} seeds from {}", report.n_seeds, report.base_seed);
    for g in &report.groups {
        println!(
            "  {:<22} max rel err {:>10.3e}  tolerance {:.0e}  {}",
            g.name,
            g.max_rel_err,
            g.tolerance,
            if g.pass() { "pass" } else { "FAIL" }
        );
    }
    if report.all_pass() {
        println!("all groups pass");
        Ok(0)
    } else {
        println!("gradient check FAILED");
        Ok(5)
    }
}

#[derive(Args)]
pub struct PredictMapArgs {
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    /// Cube header JSON
    #[arg(long, value_name = "HEADER")]
    pub cube: PathBuf,
    #[arg(long, value_name = "NAME")]
    pub domain: String,
    /// Graymap output; a color render lands next to it with a .ppm extension
    #[arg(long, value_name = "PGM")]
    pub out: PathBuf,
}

pub fn predict_map(args: PredictMapArgs) -> Result<u8> {
    let net = load_checkpoint(&args.ckpt)?;
    let idx = net.domain_index(&args.domain)?;
    let mut cube = load_cube(&args.cube)?;
    let spec = &net.specs()[idx];
    if !spec.band_keep.is_empty() && cube.bands() == spec.bands_raw {
        cube = band_reduce(&cube, &spec.band_keep)?;
    }
    let map = infer_map(&net, idx, &cube)?;
    write_pgm(&map, &args.out)?;
    let ppm = args.out.with_extension("ppm");
    write_ppm(&map, &ppm)?;
    println!("map {} ({}x{})", args.out.display(), map.height(), map.width());
    println!("color {}", ppm.display());
    Ok(0)
}
