use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use serde_json::{json, Value as Json};

use univharm::builder::{build_checked, BuildSpec, Target};
use univharm::schedule::{make_fm_schedule, make_x_schedule, Growth, Schedule};
use univharm::span::{
    combo, double_genericity, joint_build_certified, CertificateRequest, Combo, DemoConfig, JointSpec, JointTuple,
};
use univharm::{dense_family, CRat, CorrectionPolicy, Error, IndexSet, Rational, Scalar, SimpleFunction, TreeConfig};

use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::{BuildArgs, Cli, Command, DemoArgs, ModeArg, ScheduleArgs, SpanArgs};

pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn parse(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }

    fn invalid(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Parse(_) => 1,
            Error::Schedule(_) => 3,
            _ => 2,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::parse(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::parse(e.to_string())
    }
}

type Outcome = Result<u8, CliError>;

pub fn run(cli: &Cli, argv: &[String]) -> Outcome {
    let cap = cli.depth_cap;
    match &cli.command {
        Command::TreeValidate { config, depth } => tree_validate(config, *depth, cap),
        Command::Metric { config, a, b, mode } => match mode {
            ModeArg::Exact => metric::<CRat>(config, a, b, cap),
            ModeArg::Float => metric::<Complex64>(config, a, b, cap),
        },
        Command::Build(args) => match args.mode {
            ModeArg::Exact => build_cmd::<CRat>(args, cap, argv),
            ModeArg::Float => build_cmd::<Complex64>(args, cap, argv),
        },
        Command::Density { input, n0 } => density(input, *n0),
        Command::Span(args) => span_cmd(args, cap, argv),
        Command::Demo(args) => demo_cmd(args, cap, argv),
        Command::Rerun { manifest, out } => rerun(manifest, out),
    }
}

/// A configuration file, or the built-in binary tree.
fn load_tree(config: &str, cap: Option<usize>, horizon: u64) -> Result<Arc<TreeConfig>, CliError> {
    if config == "binary" {
        let depth = cap.unwrap_or((horizon as usize).max(32));
        return Ok(Arc::new(TreeConfig::binary(depth)));
    }
    let text = fs::read_to_string(config).map_err(|e| CliError::parse(format!("{config}: {e}")))?;
    let tree = TreeConfig::from_json(&text)?;
    Ok(Arc::new(match cap {
        Some(c) => tree.with_depth_cap(c),
        None => tree,
    }))
}

fn read_json(path: &Path) -> Result<Json, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::parse(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::parse(format!("{}: {e}", path.display())))
}

fn write_json(dir: &Path, name: &str, doc: &Json) -> Result<String, CliError> {
    fs::write(dir.join(name), serde_json::to_string_pretty(doc)? + "\n")?;
    Ok(name.to_string())
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<String, CliError> {
    fs::write(dir.join(name), text)?;
    Ok(name.to_string())
}

fn finish_manifest(dir: &Path, command: &str, config: &str, argv: &[String], seed: Option<u64>, outputs: &[String]) -> Result<(), CliError> {
    let manifest = RunManifest {
        command: command.into(),
        config: config.into(),
        parameters: argv.to_vec(),
        seed,
        outputs: RunManifest::hash_outputs(dir, outputs)?,
    };
    write_json(dir, MANIFEST_FILE, &serde_json::to_value(&manifest)?)?;
    Ok(())
}

fn rational(s: &str) -> Result<Rational, CliError> {
    Rational::from_str(s).map_err(|e| CliError::parse(format!("{s:?}: {e}")))
}

/// `re` or `re:im`.
fn complex(s: &str) -> Result<CRat, CliError> {
    match s.split_once(':') {
        Some((re, im)) => Ok(CRat::new(rational(re.trim())?, rational(im.trim())?)),
        None => Ok(CRat::real(rational(s.trim())?)),
    }
}

fn policy(s: &str) -> Result<CorrectionPolicy, CliError> {
    if s == "argmin" {
        return Ok(CorrectionPolicy::ArgminQ);
    }
    s.strip_prefix("fixed:")
        .and_then(|i| i.parse().ok())
        .map(CorrectionPolicy::Fixed)
        .ok_or_else(|| CliError::parse(format!("unknown policy {s:?}; use argmin or fixed:I")))
}

fn dense_indices(spec: &str) -> Option<Result<Vec<u64>, CliError>> {
    let list = spec.strip_prefix("dense:")?;
    Some(
        list.split(',')
            .map(|i| i.trim().parse::<u64>().map_err(|e| CliError::parse(format!("dense index {i:?}: {e}"))))
            .collect(),
    )
}

fn schedule(args: &ScheduleArgs, tree: &TreeConfig, levels: &[usize]) -> Result<Schedule, CliError> {
    let horizon = args.horizon.ok_or_else(|| CliError::parse("--horizon is required for this schedule"));
    let eps = rational(&args.eps)?;
    let schedule = match args.schedule.as_str() {
        "x" => make_x_schedule(tree, levels, &vec![eps; levels.len()], horizon?, &Growth::default())?.schedule,
        "fm" => {
            let pairs: Vec<(usize, Rational)> = (1..=levels.len()).map(|k| (k, eps.clone())).collect();
            make_fm_schedule(tree, &pairs, levels, args.stride, horizon?)?
        }
        "empty" => Schedule::empty(horizon?),
        path => serde_json::from_value(read_json(Path::new(path))?)?,
    };
    schedule.validate(tree, levels)?;
    Ok(schedule)
}

fn tree_validate(config: &str, depth: Option<usize>, cap: Option<usize>) -> Outcome {
    let tree = load_tree(config, cap, 0)?;
    let depth = depth.unwrap_or(12).min(tree.depth_cap());
    for n in 0..depth {
        let report = tree.consistency_check(n)?;
        if let Some(v) = report.violations.first() {
            println!(
                "level {n}: vertex {} has measure {} but its children sum to {}",
                v.vertex, v.father_measure, v.children_sum
            );
            return Ok(2);
        }
    }
    println!("ok: sector measures consistent through level {depth}");
    Ok(0)
}

fn metric<S: Scalar>(config: &str, a: &Path, b: &Path, cap: Option<usize>) -> Outcome {
    let tree = load_tree(config, cap, 0)?;
    let f = SimpleFunction::<S>::from_json(tree.clone(), &read_json(a)?)?;
    let g = SimpleFunction::<S>::from_json(tree, &read_json(b)?)?;
    let p = f.metric_p(&g)?;
    let exact = f.metric_p_exact(&g)?;
    let doc = json!({"P": p, "P_exact": exact.map(|e| e.to_string())});
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(0)
}

fn build_targets<S: Scalar>(spec: &str, tree: &Arc<TreeConfig>) -> Result<Vec<Target<S>>, CliError> {
    if let Some(indices) = dense_indices(spec) {
        return indices?.into_iter().map(|i| Ok(Target::new(dense_family(tree, 1, i)?, format!("h{i}")))).collect();
    }
    let doc = read_json(Path::new(spec))?;
    let list = doc.as_array().ok_or_else(|| CliError::parse("a targets file holds a JSON array"))?;
    list.iter().map(|t| Ok(Target::from_json(tree.clone(), t)?)).collect()
}

fn build_cmd<S: Scalar>(args: &BuildArgs, cap: Option<usize>, argv: &[String]) -> Outcome {
    let common = &args.common;
    let tree = load_tree(&common.config, cap, common.horizon.unwrap_or(0))?;
    let targets = build_targets::<S>(&args.targets, &tree)?;
    let m = targets.first().map_or(1, |t| t.h.m());
    let levels: Vec<usize> = targets.iter().map(Target::level).collect();
    let schedule = schedule(common, &tree, &levels)?;
    let initial: Vec<S> = match &args.initial {
        Some(s) => s.split(',').map(|x| complex(x).map(|c| S::from_crat(&c))).collect::<Result<_, _>>()?,
        None => vec![S::zero(); m],
    };
    let spec = BuildSpec::new(tree, targets, schedule, initial).with_policy(policy(&common.policy)?);
    let (result, report) = build_checked(spec)?;
    fs::create_dir_all(&common.out)?;
    let dir = common.out.as_path();
    let mut outputs = vec![
        write_json(dir, "result.json", &result.to_json())?,
        write_text(dir, "trace.tsv", &result.trace())?,
        write_json(dir, "verify.json", &serde_json::to_value(&report)?)?,
    ];
    let tables: String = report
        .densities
        .iter()
        .enumerate()
        .map(|(k, d)| format!("# target {}\n{}", k + 1, d.to_table()))
        .collect();
    outputs.push(write_text(dir, "density.tsv", &tables)?);
    finish_manifest(dir, "build", &common.config, argv, None, &outputs)?;
    println!("levels: {}", result.log.len());
    for (k, v) in result.visits.iter().enumerate() {
        println!("target {}: {} visits", k + 1, v.len());
    }
    println!("verified: {}", report.passed());
    for f in report.failures.iter().take(10) {
        println!("  level {}: {}", f.level, f.reason);
    }
    Ok(if report.passed() { 0 } else { 2 })
}

fn density(input: &Path, n0: u64) -> Outcome {
    let doc = read_json(input)?;
    let sets: Vec<IndexSet> = match doc.get("visits") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => vec![serde_json::from_value(doc)?],
    };
    for (k, set) in sets.iter().enumerate() {
        let report = set.density_profile(n0)?;
        println!("# set {}", k + 1);
        print!("{}", report.to_table());
    }
    Ok(0)
}

fn joint_tuples(spec: &str, coords: usize, tree: &Arc<TreeConfig>) -> Result<Vec<JointTuple<CRat>>, CliError> {
    if let Some(indices) = dense_indices(spec) {
        return indices?
            .into_iter()
            .enumerate()
            .map(|(k, i)| {
                Ok(if k == 0 {
                    JointTuple::pattern(dense_family(tree, 1, i)?, coords, format!("(0,…,0,h{i})"))?
                } else {
                    JointTuple::dense(tree, 1, coords, i, format!("dense{i}"))?
                })
            })
            .collect();
    }
    let doc = read_json(Path::new(spec))?;
    let list = doc.as_array().ok_or_else(|| CliError::parse("a tuples file holds a JSON array"))?;
    list.iter()
        .map(|t| {
            let label = t.get("label").and_then(Json::as_str).unwrap_or_default();
            let coords = t
                .get("coords")
                .and_then(Json::as_array)
                .ok_or_else(|| CliError::parse("tuple without a \"coords\" array"))?
                .iter()
                .map(|c| SimpleFunction::from_json(tree.clone(), c))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(JointTuple::new(coords, label)?)
        })
        .collect()
}

fn span_cmd(args: &SpanArgs, cap: Option<usize>, argv: &[String]) -> Outcome {
    let common = &args.common;
    let tree = load_tree(&common.config, cap, common.horizon.unwrap_or(0))?;
    let tuples = joint_tuples(&args.targets, args.coords, &tree)?;
    let levels: Vec<usize> = tuples.iter().map(JointTuple::level).collect();
    let schedule = schedule(common, &tree, &levels)?;
    let eps = rational(&common.eps)?;
    let coords = tuples.first().map_or(0, JointTuple::len);
    let combos: Vec<Combo<CRat>> = match &args.coeffs {
        Some(list) => list
            .split(';')
            .map(|c| Ok(Combo::new(c.split(',').map(complex).collect::<Result<_, _>>()?)?))
            .collect::<Result<_, CliError>>()?,
        None => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
            (0..args.combos).map(|_| Combo::random(&mut rng, coords.min(3), 4)).collect::<Result<_, _>>()?
        }
    };
    let requests: Vec<CertificateRequest<CRat>> =
        combos.into_iter().map(|combo| CertificateRequest { combo, eps: eps.clone() }).collect();
    let spec = JointSpec::new(tree, tuples, schedule)
        .with_flatten(!args.no_flatten)
        .with_policy(policy(&common.policy)?);
    let (family, certificates) = joint_build_certified(spec, &requests)?;
    fs::create_dir_all(&common.out)?;
    let dir = common.out.as_path();
    let certs: Vec<Json> = certificates.iter().map(|c| c.to_json()).collect();
    let mut outputs = vec![
        write_json(dir, "result.json", &family.result.to_json())?,
        write_text(dir, "trace.tsv", &family.result.trace())?,
        write_json(dir, "verify.json", &serde_json::to_value(&family.report)?)?,
        write_json(dir, "certificates.json", &Json::Array(certs))?,
    ];
    if let Some(o) = &family.offsets {
        outputs.push(write_json(dir, "offsets.json", &json!({"shift_level": o.shift_level, "reports": o.reports}))?);
    }
    if args.write_combos {
        for (i, r) in requests.iter().enumerate() {
            outputs.push(write_json(dir, &format!("combo_{}.json", i + 1), &combo(&family, &r.combo)?.to_json())?);
        }
    }
    finish_manifest(dir, "span", &common.config, argv, args.coeffs.is_none().then_some(args.seed), &outputs)?;
    let unsound: usize = certificates.iter().map(|c| c.unsound().len()).sum();
    for (r, c) in requests.iter().zip(&certificates) {
        println!("combo {}: {} certified levels", r.combo.to_json(), c.levels.len());
    }
    println!("verified: {}, unsound levels: {unsound}", family.report.passed());
    Ok(if family.report.passed() && unsound == 0 { 0 } else { 2 })
}

fn demo_cmd(args: &DemoArgs, cap: Option<usize>, argv: &[String]) -> Outcome {
    let tree = load_tree(&args.config, cap, args.horizon)?;
    let config = DemoConfig {
        horizon: args.horizon,
        coords: args.coords,
        targets: args.targets,
        stride: args.stride,
        eps: rational(&args.eps)?,
        combos: args.combos,
        seed: args.seed,
    };
    let report = double_genericity(tree, &config)?;
    fs::create_dir_all(&args.out)?;
    let dir = args.out.as_path();
    let text = report.to_text();
    let outputs = vec![write_json(dir, "demo.json", &report.to_json())?, write_text(dir, "demo.txt", &text)?];
    finish_manifest(dir, "demo", &args.config, argv, Some(args.seed), &outputs)?;
    print!("{text}");
    Ok(if report.passed() { 0 } else { 2 })
}

fn rerun(manifest: &Path, out: &Path) -> Outcome {
    let recorded: RunManifest = serde_json::from_value(read_json(manifest)?)?;
    let mut argv = vec!["univharm".to_string()];
    argv.extend(recorded.with_out(out));
    let cli = <Cli as clap::Parser>::try_parse_from(&argv).map_err(|e| CliError::parse(e.to_string()))?;
    if matches!(cli.command, Command::Rerun { .. }) {
        return Err(CliError::invalid("a manifest cannot record a rerun"));
    }
    let code = run(&cli, &argv[1..])?;
    let fresh: RunManifest = serde_json::from_value(read_json(&out.join(MANIFEST_FILE))?)?;
    let mut identical = true;
    for old in &recorded.outputs {
        match fresh.outputs.iter().find(|a| a.path == old.path) {
            Some(new) if new.sha256 == old.sha256 => println!("identical: {}", old.path),
            _ => {
                println!("differs: {}", old.path);
                identical = false;
            }
        }
    }
    Ok(if identical { code } else { 2 })
}
