//! Command-line surface.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::error::{invalid, Error, Result};
use crate::eval::{frechet, intra_diversity, metrics_csv, nas, nas_csv, pca2d, pca_csv, FeatureSet, Split};
use crate::fusion::{frequency_fuse, pixel_fuse, FusionConfig};
use crate::io::archive::{self, read_archive, write_archive, Archive};
use crate::io::config::RunConfig;
use crate::io::model_file::{self, read_model, write_model};
use crate::io::pnm::{read_pnm, write_pnm};
use crate::io::{read_file, write_atomic};
use crate::latent::{CategoryLibrary, Latent, Role};
use crate::pipeline::{features, Generator, Method};
use crate::rng;
use crate::stable::{apply_direction, estimate_class_embedding, nearest_seen, reduce_relevant, salient_editing_directions};
use crate::world::{make_world, sample_library, simulate_inversion, World, WorldSpec};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_FILE: i32 = 4;
pub const EXIT_INPUT: i32 = 5;
pub const EXIT_DIVERGED: i32 = 6;

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::CorruptHeader { .. } | Error::TruncatedPayload { .. } | Error::VersionUnsupported { .. } => {
            EXIT_FILE
        }
        Error::InvalidInput(_) => EXIT_INPUT,
        Error::TrainingDiverged { .. } => EXIT_DIVERGED,
    }
}

#[derive(Debug, Parser)]
#[command(name = "sage", version, about = "Stable few-shot latent editing on a synthetic generative world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a world and sample a latent library from it.
    Synth(SynthArgs),
    /// Learn the category-irrelevant dictionary.
    Train(TrainArgs),
    /// Estimate a class embedding from K shots.
    Embed(EmbedArgs),
    /// Move codes along a salient editing direction.
    Edit(EditArgs),
    /// Generate new codes for the unseen categories.
    Generate(GenerateArgs),
    /// Pixel-domain fusion of three images.
    FusePixel(FuseArgs),
    /// Frequency-domain fusion of three images.
    FuseFreq(FuseArgs),
    /// Metric CSVs for generated archives.
    Eval(EvalArgs),
    /// Print a header summary of a file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Library archive: seen samples and noisy unseen shots.
    #[arg(long)]
    out: PathBuf,
    /// World file (JSON world spec).
    #[arg(long)]
    world_out: Option<PathBuf>,
    /// Archive of clean held-out unseen codes.
    #[arg(long)]
    test_out: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    seen_samples: usize,
    /// Shots per unseen category; defaults to `eval.shots`.
    #[arg(long)]
    shots: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    category: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    t_b: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EditArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    category: String,
    /// Index of the singular direction (0 = most salient).
    #[arg(long, default_value_t = 0)]
    direction: usize,
    #[arg(long)]
    alpha: f64,
    /// Restrict the edit to the layers of one group.
    #[arg(long)]
    group: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Age,
    Sage,
    SageMulti,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Age => Method::Age,
            MethodArg::Sage => Method::Sage,
            MethodArg::SageMulti => Method::SageMulti,
        }
    }
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    alpha: Option<f64>,
    /// Comma-separated `t_B` values.
    #[arg(long, value_delimiter = ',')]
    t_b: Option<Vec<usize>>,
    #[arg(long)]
    t_c: Option<usize>,
    #[arg(long)]
    t_a: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    /// Codes per category; defaults to `eval.generated_per_category`.
    #[arg(long)]
    count: Option<usize>,
    /// Only this unseen category.
    #[arg(long)]
    category: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FuseArgs {
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    inv: PathBuf,
    #[arg(long)]
    edited: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Real K-shot archive (unseen categories are used).
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// World file; needed for feature-space metrics.
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated subset of frechet, diversity, nas, pca.
    #[arg(long, value_delimiter = ',', default_value = "frechet,diversity,nas,pca")]
    metrics: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    file: PathBuf,
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit status. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Embed(a) => embed(a),
        Command::Edit(a) => edit(a),
        Command::Generate(a) => generate(a),
        Command::FusePixel(a) => fuse(a, false),
        Command::FuseFreq(a) => fuse(a, true),
        Command::Eval(a) => evaluate(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_world(path: &Path) -> Result<World> {
    let bytes = read_file(path)?;
    let spec: WorldSpec =
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    spec.validate().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    make_world(&spec)
}

fn json_bytes(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s.into_bytes()
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let spec = WorldSpec {
        seed: a.seed,
        ..cfg.world.clone()
    };
    spec.validate()?;
    let world = make_world(&spec)?;
    let shots = a.shots.unwrap_or(cfg.eval.shots);
    let eta = cfg.eval.eta;
    let test_n = cfg.eval.test_per_category;
    let per_unseen = shots + if a.test_out.is_some() { test_n } else { 0 };
    let full = sample_library(&world, a.seen_samples, per_unseen.max(1), rng::derive_seed(a.seed, &[1]))?;
    let mut lib = CategoryLibrary::new(spec.layers, spec.dims)?;
    let mut test = CategoryLibrary::new(spec.layers, spec.dims)?;
    for (k, (id, cat)) in full.iter().enumerate() {
        match cat.role {
            Role::Seen => lib.insert(id.clone(), Role::Seen, cat.codes.clone())?,
            Role::Unseen => {
                let noisy = cat.codes[..shots]
                    .iter()
                    .enumerate()
                    .map(|(i, w)| {
                        Ok(simulate_inversion(w, eta, rng::derive_seed(a.seed, &[2, k as u64, i as u64]))?.quantized())
                    })
                    .collect::<Result<Vec<_>>>()?;
                lib.insert(id.clone(), Role::Unseen, noisy)?;
                if a.test_out.is_some() {
                    test.insert(id.clone(), Role::Unseen, cat.codes[shots..].to_vec())?;
                }
            }
        }
    }
    let meta = json!({"kind": "library", "seed": a.seed, "eta": eta, "shots": shots, "seen_samples": a.seen_samples});
    write_archive(&a.out, &Archive::with_metadata(lib, meta))?;
    if let Some(p) = &a.test_out {
        let meta = json!({"kind": "test", "seed": a.seed});
        write_archive(p, &Archive::with_metadata(test, meta))?;
    }
    if let Some(p) = &a.world_out {
        write_atomic(p, &json_bytes(&serde_json::to_value(&spec).expect("spec serializes")))?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let world = load_world(&a.world)?;
    let lib = read_archive(&a.archive)?.library;
    let mut tc = cfg.train.clone();
    tc.seed = a.seed;
    if let Some(n) = a.iterations {
        tc.iterations = n;
    }
    let model = crate::factorization::train(&lib, &world, &tc)?;
    write_model(&a.out, &model)
}

fn category_shots<'a>(lib: &'a CategoryLibrary, id: &str, shots: usize) -> Result<&'a [Latent]> {
    let codes = lib.codes(id)?;
    if shots == 0 || codes.len() < shots {
        return Err(invalid(format!("category {id:?} has {} codes, {shots} shots requested", codes.len())));
    }
    Ok(&codes[..shots])
}

fn embed(a: EmbedArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let model = read_model(&a.model)?;
    let lib = read_archive(&a.archive)?.library;
    let mut edit = cfg.edit.clone();
    if let Some(k) = a.shots {
        edit.shots = k;
    }
    edit.validate()?;
    let t_b = a.t_b.unwrap_or(edit.t_b[0]);
    let shots = category_shots(&lib, &a.category, edit.shots)?;
    let bf = reduce_relevant(&model.relevant, t_b)?;
    let e_hat = estimate_class_embedding(shots, &bf)?;
    let mean = crate::latent::class_embedding(shots)?;
    let t_c = edit.resolved_t_c(model.relevant.num_categories());
    let neighbors = nearest_seen(&e_hat, &model.relevant, t_c)?;
    let layers: Vec<Vec<f64>> = (0..e_hat.layers()).map(|l| e_hat.layer(l).to_vec()).collect();
    let report = json!({
        "category": a.category,
        "shots": edit.shots,
        "t_b": t_b,
        "t_c": t_c,
        "seed": a.seed,
        "nearest_seen": neighbors,
        "embedding_norm": e_hat.norm(),
        "shot_mean_norm": mean.norm(),
        "relevant_norm": bf.coordinate_norm(&e_hat)?,
        "embedding": layers,
    });
    write_atomic(&a.out, &json_bytes(&report))
}

fn edit(a: EditArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let lib = read_archive(&a.archive)?.library;
    let codes = lib.codes(&a.category)?;
    let role = lib.get(&a.category).map(|c| c.role).unwrap_or(Role::Unseen);
    let dirs = salient_editing_directions(&model.dictionary)?;
    let (layers, dims) = (model.dictionary.num_layers(), model.dictionary.dims());
    if a.direction >= model.dictionary.atoms() {
        return Err(invalid(format!("direction {} outside 0..{}", a.direction, model.dictionary.atoms())));
    }
    let active: Vec<usize> = match a.group {
        Some(g) if g >= model.partition().num_groups() => {
            return Err(invalid(format!("group {g} outside 0..{}", model.partition().num_groups())))
        }
        Some(g) => model.partition().layers_of(g).collect(),
        None => (0..layers).collect(),
    };
    let mut delta = Latent::zeros(layers, dims);
    for &l in &active {
        delta.layer_mut(l).copy_from_slice(&dirs[l].col(a.direction));
    }
    let edited = codes
        .iter()
        .map(|w| Ok(apply_direction(w, &delta, a.alpha)?.quantized()))
        .collect::<Result<Vec<_>>>()?;
    let mut out = CategoryLibrary::new(layers, dims)?;
    out.insert(a.category.clone(), role, edited)?;
    let meta = json!({"kind": "edit", "direction": a.direction, "alpha": a.alpha, "group": a.group, "seed": a.seed});
    write_archive(&a.out, &Archive::with_metadata(out, meta))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let model = read_model(&a.model)?;
    let lib = read_archive(&a.archive)?.library;
    let mut edit = cfg.edit.clone();
    if let Some(x) = a.alpha {
        edit.alpha = x;
    }
    if let Some(x) = a.t_b.clone() {
        edit.t_b = x;
    }
    if a.t_c.is_some() {
        edit.t_c = a.t_c;
    }
    if a.t_a.is_some() {
        edit.t_a = a.t_a;
    }
    if let Some(x) = a.shots {
        edit.shots = x;
    }
    edit.validate()?;
    let count = a.count.unwrap_or(cfg.eval.generated_per_category);
    let method = Method::from(a.method);
    let mut targets = lib.filter_role(Role::Unseen);
    if let Some(id) = &a.category {
        let cat = targets
            .get(id)
            .cloned()
            .ok_or_else(|| invalid(format!("no unseen category {id:?} in the archive")))?;
        targets = CategoryLibrary::new(lib.layers(), lib.dims())?;
        targets.insert(id.clone(), Role::Unseen, cat.codes)?;
    }
    if targets.is_empty() {
        return Err(invalid("archive has no unseen categories to generate for"));
    }
    let gen = Generator::new(&model, &lib)?;
    let out = gen.generate_library(&targets, method, &edit, count, a.seed)?;
    let meta = json!({
        "kind": "generated",
        "method": method.as_str(),
        "alpha": edit.alpha,
        "t_b": edit.t_b,
        "t_c": edit.resolved_t_c(model.relevant.num_categories()),
        "t_a": edit.resolved_t_a(model.dictionary.atoms()),
        "shots": edit.shots,
        "seed": a.seed,
    });
    write_archive(&a.out, &Archive::with_metadata(out, meta))
}

fn fuse(a: FuseArgs, frequency: bool) -> Result<()> {
    let fc: FusionConfig = load_config(&a.config)?.fusion;
    let real = read_pnm(&a.real)?;
    let inv = read_pnm(&a.inv)?;
    let edited = read_pnm(&a.edited)?;
    let out = if frequency {
        frequency_fuse(&real, &inv, &edited, &fc)?
    } else {
        pixel_fuse(&real, &inv, &edited, &fc)?
    };
    write_pnm(&a.out, &out)
}

fn split_of(lib: &CategoryLibrary, ids: &[String], world: Option<&World>, cfg: &RunConfig) -> Result<Split> {
    let mut s = BTreeMap::new();
    for id in ids {
        s.insert(id.clone(), features(world, lib.codes(id)?, cfg.eval.feature_space)?);
    }
    Ok(s)
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let world = a.world.as_deref().map(load_world).transpose()?;
    let train = read_archive(&a.train)?.library;
    let gen = read_archive(&a.generated)?.library;
    let test = read_archive(&a.test)?.library;
    let ids: Vec<String> = test.iter().map(|(id, _)| id.clone()).collect();
    for id in &ids {
        for (name, l) in [("train", &train), ("generated", &gen)] {
            if l.get(id).is_none() {
                return Err(invalid(format!("category {id:?} missing from the {name} archive")));
            }
        }
    }
    for m in &a.metrics {
        if !["frechet", "diversity", "nas", "pca"].contains(&m.as_str()) {
            return Err(invalid(format!("unknown metric {m:?}")));
        }
    }
    let want = |m: &str| a.metrics.iter().any(|x| x == m);
    std::fs::create_dir_all(&a.out_dir).map_err(|e| crate::io::io_err(&a.out_dir, e))?;
    let w = world.as_ref();
    let train_s = split_of(&train, &ids, w, &cfg)?;
    let gen_s = split_of(&gen, &ids, w, &cfg)?;
    let test_s = split_of(&test, &ids, w, &cfg)?;

    let mut rows = Vec::new();
    if want("frechet") {
        let mut all_g = Vec::new();
        let mut all_t = Vec::new();
        for id in &ids {
            let g = FeatureSet::new(format!("{id}/generated"), gen_s[id].clone())?;
            let t = FeatureSet::new(format!("{id}/test"), test_s[id].clone())?;
            rows.push(("frechet".to_string(), id.clone(), frechet(&g, &t)?));
            all_g.extend(gen_s[id].iter().cloned());
            all_t.extend(test_s[id].iter().cloned());
        }
        let f = frechet(&FeatureSet::new("generated", all_g)?, &FeatureSet::new("test", all_t)?)?;
        rows.push(("frechet".to_string(), "all".to_string(), f));
    }
    if want("diversity") {
        let sets = ids
            .iter()
            .map(|id| FeatureSet::new(id.clone(), gen_s[id].clone()))
            .collect::<Result<Vec<_>>>()?;
        for s in &sets {
            rows.push(("diversity".to_string(), s.label().to_string(), intra_diversity(std::slice::from_ref(s))?));
        }
        rows.push(("diversity".to_string(), "all".to_string(), intra_diversity(&sets)?));
    }
    if want("frechet") || want("diversity") {
        write_atomic(&a.out_dir.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
    }
    if want("nas") {
        let report = nas(&train_s, &gen_s, &test_s, a.seed)?;
        write_atomic(&a.out_dir.join("nas.csv"), nas_csv(&report).as_bytes())?;
    }
    if want("pca") {
        let mut labels = Vec::new();
        let mut codes = Vec::new();
        for (src, lib) in [("train", &train), ("generated", &gen), ("test", &test)] {
            for id in &ids {
                for c in lib.codes(id)? {
                    labels.push(format!("{id}/{src}"));
                    codes.push(c.values().to_vec());
                }
            }
        }
        let pts = pca2d(&codes)?;
        write_atomic(&a.out_dir.join("pca.csv"), pca_csv(&labels, &pts)?.as_bytes())?;
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let bytes = read_file(&a.file)?;
    let head = bytes.get(..4).unwrap_or(&[]);
    if head == archive::MAGIC {
        let ar = archive::decode_archive(&bytes)?;
        let lib = &ar.library;
        println!("SAGL v{} L={} D={} categories={} codes={}", archive::VERSION, lib.layers(), lib.dims(), lib.len(), lib.total_codes());
        for (id, c) in lib.iter() {
            println!("  {id} {} {}", c.role.as_str(), c.codes.len());
        }
        if let Some(m) = &ar.metadata {
            println!("  metadata {m}");
        }
    } else if head == model_file::MAGIC {
        let m = model_file::decode_model(&bytes)?;
        let a = &m.dictionary;
        println!(
            "SAGM v{} L={} D={} l={} G={} S={}",
            model_file::VERSION,
            a.num_layers(),
            a.dims(),
            a.atoms(),
            a.partition().num_groups(),
            m.relevant.num_categories()
        );
        println!("  partition {:?}", a.partition().ranges());
        println!("  encoder {:?}", m.encoder.sizes());
        println!("  iterations {}", m.log.len());
        if let Some(r) = m.log.last() {
            println!("  final rec={} orth={} sparse={} total={}", r.rec, r.orth, r.sparse, r.total);
        }
    } else if head.starts_with(b"P5") || head.starts_with(b"P6") {
        let img = crate::io::pnm::decode_pnm(&bytes)?;
        println!("PNM {}x{} channels={}", img.width(), img.height(), img.channels());
    } else {
        let spec: WorldSpec = serde_json::from_slice(&bytes).map_err(|_| Error::CorruptHeader {
            offset: 0,
            reason: "unrecognized file type".into(),
        })?;
        spec.validate()?;
        println!("{}", serde_json::to_string(&spec).expect("spec serializes"));
    }
    Ok(())
}
