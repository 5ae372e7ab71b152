use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::Context;
use deqkg::checkpoint::Checkpoint;
use deqkg::datasets::{
    fd2_clauses, fd2_test_bundle, fd2_train_bundle, forest_fire_sample, generate_fd2, parse_clauses,
    sample_subgraph, split_dataset, uqer_derive_with_budget, DatasetBundle,
};
use deqkg::deq::{deq_trend, random_graph, RandomFeatureScorer};
use deqkg::encoder::{init_encoder, score_triplets, EncoderConfig, EncoderParams, TripletScorer};
use deqkg::eval::{
    evaluate, random_baseline, report_write, CorruptSide, EvalProtocol, FnScorer, RelationNegatives, Scorer, Task,
};
use deqkg::io::{format_triplets, read_triplets, write_triplets, NameMaps};
use deqkg::rng::keyed_rng;
use deqkg::training::{train_with, EpochRecord, TrainGraph, TrainOptions, Validation};
use deqkg::verify::{check_double_invariance, check_equivariant_construction, expressivity_counterexample};
use deqkg::{Error, KnowledgeGraph, Triplet};
use rand::Rng;
use serde::Deserialize;

use crate::{CheckArgs, EvalArgs, GenFd2Args, SampleArgs, SampleMethod, SplitArgs, TopicSplitArgs, TrainArgs, UqerArgs};

/// An audit ran and found a violation.
#[derive(Debug)]
pub struct AuditFailed(pub String);

impl fmt::Display for AuditFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "audit failed: {}", self.0)
    }
}

impl std::error::Error for AuditFailed {}

/// 1 for bad input, 2 for a failed audit, 3 for anything that broke at run
/// time.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<AuditFailed>().is_some() {
        return 2;
    }
    if let Some(err) = e.downcast_ref::<Error>() {
        return match err {
            Error::Io(_) | Error::Json(_) | Error::Budget { .. } | Error::NonFiniteLoss { .. } => 3,
            _ => 1,
        };
    }
    3
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::Invalid(msg.into()).into()
}

fn prepare_dir(dir: &Path, force: bool) -> anyhow::Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(invalid(format!("{} is not empty; pass --force to overwrite", dir.display())));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_graph(path: &Path) -> anyhow::Result<(KnowledgeGraph, NameMaps)> {
    let (ts, maps) = read_triplets(path)?;
    let g = KnowledgeGraph::new(ts, maps.nodes.len(), maps.relations.len().max(1))?;
    Ok((g, maps))
}

pub fn gen_fd2(a: &GenFd2Args) -> anyhow::Result<()> {
    if a.train_depths.is_empty() || a.test_depths.is_empty() {
        return Err(invalid("tree depth lists must not be empty"));
    }
    if !(0.0..1.0).contains(&a.valid_fraction) {
        return Err(invalid("--valid-fraction must be in [0, 1)"));
    }
    prepare_dir(&a.out, a.force)?;
    let train = fd2_train_bundle(&a.train_depths, a.valid_fraction, a.seed)?;
    let test = fd2_test_bundle(&a.test_depths)?;
    train.save(&a.out.join("train"))?;
    test.save(&a.out.join("test"))?;
    println!(
        "train: {} nodes, {} relations, {} observed, {} train / {} valid queries",
        train.num_nodes(),
        train.num_relations(),
        train.observed.num_triplets(),
        train.train.len(),
        train.valid.len()
    );
    println!(
        "test: {} nodes, {} relations, {} observed, {} test queries",
        test.num_nodes(),
        test.num_relations(),
        test.observed.num_triplets(),
        test.test.len()
    );
    Ok(())
}

pub fn sample(a: &SampleArgs) -> anyhow::Result<()> {
    let (g, maps) = load_graph(&a.input)?;
    let ts = match a.method {
        SampleMethod::Bfs => sample_subgraph(&g, a.max_nodes, a.max_triplets, a.max_per_node, a.seed)?,
        SampleMethod::ForestFire => {
            let target = a
                .target_nodes
                .ok_or_else(|| invalid("--target-nodes is required for forest-fire sampling"))?;
            if !(0.0..1.0).contains(&a.burn_prob) {
                return Err(invalid("--burn-prob must be in [0, 1)"));
            }
            forest_fire_sample(&g, target, a.burn_prob, a.seed)?.1
        }
    };
    write_triplets(&ts, &maps, &a.out)?;
    let nodes: HashSet<usize> = ts.iter().flat_map(|t| [t.head, t.tail]).collect();
    println!("sampled {} triplets over {} nodes", ts.len(), nodes.len());
    Ok(())
}

pub fn split(a: &SplitArgs) -> anyhow::Result<()> {
    let (g, maps) = load_graph(&a.input)?;
    let mut bundle = split_dataset(g.triplets(), g.num_nodes(), g.num_relations(), &a.ratios, a.seed)?;
    bundle.names = maps;
    bundle
        .provenance
        .parameters
        .insert("input".into(), serde_json::json!(a.input.display().to_string()));
    prepare_dir(&a.out, a.force)?;
    bundle.save(&a.out)?;
    println!(
        "observed {}, valid {}, test {}",
        bundle.observed.num_triplets(),
        bundle.valid.len(),
        bundle.test.len()
    );
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupsFile {
    group: Vec<Group>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Group {
    name: String,
    relations: Vec<String>,
}

pub fn topic_split(a: &TopicSplitArgs) -> anyhow::Result<()> {
    let (g, maps) = load_graph(&a.input)?;
    let text = fs::read_to_string(&a.groups)?;
    let file: GroupsFile = toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", a.groups.display())))?;
    let mut groups = Vec::new();
    for gs in &file.group {
        if gs.name.is_empty() || gs.name.contains(['/', '\\']) || gs.name.starts_with('.') {
            return Err(invalid(format!("group name {:?} is not a plain file name", gs.name)));
        }
        let rels = gs
            .relations
            .iter()
            .map(|r| maps.relations.get(r).ok_or_else(|| invalid(format!("unknown relation {r:?}"))))
            .collect::<anyhow::Result<Vec<usize>>>()?;
        groups.push((gs.name.clone(), rels));
    }
    let topics = deqkg::datasets::topic_split(g.triplets(), &groups)?;
    prepare_dir(&a.out, a.force)?;
    for t in &topics {
        let original: Vec<Triplet> = t
            .triplets
            .iter()
            .map(|x| Triplet::new(t.nodes[x.head], t.relations[x.relation], t.nodes[x.tail]))
            .collect();
        write_triplets(&original, &maps, &a.out.join(format!("{}.tsv", t.name)))?;
        println!(
            "{}: {} triplets, {} nodes, {} relations",
            t.name,
            t.triplets.len(),
            t.nodes.len(),
            t.relations.len()
        );
    }
    Ok(())
}

pub fn train(a: &TrainArgs, workers: usize) -> anyhow::Result<()> {
    let mut c = crate::config::resolve(a, workers)?;
    let resumed = match &a.resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    if let Some(ckpt) = &resumed {
        c.encoder = ckpt.encoder.clone();
    }
    if a.dry_run {
        println!("{}", serde_json::to_string_pretty(&c)?);
        return Ok(());
    }
    let data = c.data.clone().ok_or_else(|| invalid("no dataset: set `data` in the config or pass --data"))?;
    let out = c.out.clone().ok_or_else(|| invalid("no run directory: set `out` in the config or pass --out"))?;
    let bundle = DatasetBundle::load(&data)?;
    prepare_dir(&out, a.force)?;
    write_json(&c, &out.join("config.json"))?;

    let (params, start_epoch) = match &resumed {
        Some(ckpt) => (ckpt.params()?, ckpt.next_epoch),
        None => (init_encoder(&c.encoder)?, 0),
    };
    let validation = Validation::from_bundle(&bundle, c.validation.clone());
    let mut log = fs::File::create(out.join("train.log"))?;
    let mut on_epoch = |r: &EpochRecord| {
        let line = format!(
            "epoch {} loss {:.6} valid relation MRR {} node MRR {} ({:.2}s)",
            r.epoch,
            r.loss,
            r.valid_relation_mrr.map_or("-".into(), |v| format!("{v:.4}")),
            r.valid_node_mrr.map_or("-".into(), |v| format!("{v:.4}")),
            r.seconds
        );
        eprintln!("{line}");
        let _ = writeln!(log, "{line}");
    };
    let (trained, history) = train_with(
        &params,
        &[TrainGraph::from_bundle(&bundle)],
        &c.train,
        TrainOptions {
            validation: validation.as_ref(),
            start_epoch,
            on_epoch: Some(&mut on_epoch),
            ..TrainOptions::default()
        },
    )?;
    history.write_jsonl(&out.join("history.jsonl"))?;
    let mut ckpt = Checkpoint::new(&trained);
    ckpt.train = Some(c.train.clone());
    ckpt.next_epoch = start_epoch + history.records.len();
    ckpt.train_nodes = bundle.names.nodes.names().to_vec();
    ckpt.train_relations = bundle.names.relations.names().to_vec();
    ckpt.save(&out.join("checkpoint.json"))?;
    if let Some(best) = history.best_epoch {
        println!("best validation epoch {best}");
    }
    println!("checkpoint written to {}", out.join("checkpoint.json").display());

    let audit = check_double_invariance(
        &mut |g, q| score_triplets(&trained, g, q),
        c.audit_trials,
        1e-5,
        c.train.seed,
    )?;
    write_json(&audit, &out.join("audit.json"))?;
    println!("invariance audit: max relative gap {:.2e}", audit.max_rel_gap);
    if !audit.passed() {
        return Err(AuditFailed(format!("{} comparisons exceed the tolerance", audit.failing.len())).into());
    }
    Ok(())
}

fn parse_relation_negatives(s: &str) -> anyhow::Result<RelationNegatives> {
    match s {
        "all-others" => Ok(RelationNegatives::AllOthers),
        "with-replacement" => Ok(RelationNegatives::WithReplacement),
        _ => Err(invalid(format!("unknown relation negatives {s:?}"))),
    }
}

fn overlap<'a>(a: &'a [String], b: &[String]) -> Vec<&'a String> {
    let b: HashSet<&String> = b.iter().collect();
    a.iter().filter(|x| b.contains(x)).collect()
}

pub fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let task: Task = a.task.parse()?;
    let bundle = DatasetBundle::load(&a.data)?;
    let queries = match a.split.as_str() {
        "test" => &bundle.test,
        "valid" => &bundle.valid,
        "train" => &bundle.train,
        other => return Err(invalid(format!("unknown split {other:?}"))),
    };
    if queries.is_empty() {
        return Err(invalid(format!("split {:?} has no queries", a.split)));
    }
    let protocol = EvalProtocol {
        num_negatives: a.num_negatives,
        corrupt: CorruptSide::Tail,
        relation_negatives: parse_relation_negatives(&a.relation_negatives)?,
        ks: a.ks.clone(),
        filtered: a.filtered,
        seed: a.seed,
    };
    let mut metadata = BTreeMap::new();
    metadata.insert("data".to_string(), a.data.display().to_string());
    metadata.insert("split".to_string(), a.split.clone());
    let known = bundle.known();
    let report = if a.random_scorer {
        metadata.insert("scorer".into(), "uniform-random".into());
        let mut rng = keyed_rng(a.seed, &[0x7a9d]);
        let mut scorer = FnScorer(|b: &[Triplet]| b.iter().map(|_| rng.gen::<f64>()).collect());
        evaluate(&mut scorer, &bundle.observed, queries, &known, task, &protocol)?
    } else {
        let path = a
            .checkpoint
            .as_ref()
            .ok_or_else(|| invalid("--checkpoint is required unless --random-scorer is set"))?;
        let ckpt = Checkpoint::load(path)?;
        let nodes = overlap(bundle.names.nodes.names(), &ckpt.train_nodes);
        let rels = overlap(bundle.names.relations.names(), &ckpt.train_relations);
        metadata.insert("scorer".into(), "checkpoint".into());
        metadata.insert("checkpoint".into(), path.display().to_string());
        metadata.insert("shared_node_names".into(), nodes.len().to_string());
        metadata.insert("shared_relation_names".into(), rels.len().to_string());
        metadata.insert("doubly_inductive".into(), (nodes.is_empty() && rels.is_empty()).to_string());
        if !(nodes.is_empty() && rels.is_empty()) {
            let msg = format!(
                "{} node and {} relation names also occur in training (first: {:?})",
                nodes.len(),
                rels.len(),
                nodes.first().or(rels.first()).unwrap()
            );
            if !a.allow_overlap {
                return Err(invalid(format!("{msg}; pass --allow-overlap to evaluate anyway")));
            }
            eprintln!("warning: {msg}");
        }
        let params: EncoderParams = ckpt.params()?;
        let mut scorer = TripletScorer::new(&params, &bundle.observed);
        evaluate(&mut scorer as &mut dyn Scorer, &bundle.observed, queries, &known, task, &protocol)?
    };
    let base = random_baseline(report.effective_negatives, &protocol.ks);
    let mut report = report;
    metadata.insert("random_baseline_mrr".into(), format!("{:.6}", base.mrr));
    report.metadata = metadata;
    let hits: Vec<String> = report.hits.iter().map(|(k, v)| format!("Hits@{k} {v:.4}")).collect();
    println!(
        "{:?} task, {} queries, {} negatives: MRR {:.4} (random {:.4}), {}",
        task,
        report.num_queries,
        report.effective_negatives,
        report.mrr,
        base.mrr,
        hits.join(", ")
    );
    if let Some(out) = &a.out {
        report_write(&report, out)?;
    }
    Ok(())
}

fn check_params(a: &CheckArgs) -> anyhow::Result<EncoderParams> {
    match &a.checkpoint {
        Some(p) => Ok(Checkpoint::load(p)?.params()?),
        None => Ok(init_encoder(&EncoderConfig {
            seed: a.seed,
            ..EncoderConfig::default()
        })?),
    }
}

fn finish_audit<T: serde::Serialize>(report: &T, out: Option<&Path>, passed: bool, what: &str) -> anyhow::Result<()> {
    if let Some(out) = out {
        write_json(report, out)?;
    }
    if passed {
        println!("{what}: pass");
        Ok(())
    } else {
        println!("{what}: FAIL");
        Err(AuditFailed(what.to_string()).into())
    }
}

pub fn check(a: &CheckArgs) -> anyhow::Result<()> {
    let out = a.out.as_deref();
    match a.what.as_str() {
        "invariance" => {
            let params = check_params(a)?;
            let audit = check_double_invariance(
                &mut |g, q| score_triplets(&params, g, q),
                a.trials.unwrap_or(100),
                1e-5,
                a.seed,
            )?;
            println!(
                "{} comparisons over {} trials, max relative gap {:.2e}",
                audit.comparisons, audit.trials, audit.max_rel_gap
            );
            finish_audit(&audit, out, audit.passed(), "invariance")
        }
        "equivariance" => {
            let params = check_params(a)?;
            let g = random_graph(10, 3, 0.2, a.seed);
            let audit = check_equivariant_construction(
                &mut |g, q| score_triplets(&params, g, q),
                &g,
                a.trials.unwrap_or(10),
                1e-8,
                a.seed,
            )?;
            println!("{} tensor entries compared, max gap {:.2e}", audit.comparisons, audit.max_abs_gap);
            finish_audit(&audit, out, audit.passed(), "equivariance")
        }
        "counterexample" => {
            let params = check_params(a)?;
            let rep = expressivity_counterexample(&params, None, 1e-5);
            for (i, group) in rep.groups.iter().enumerate() {
                println!("group {}", i + 1);
                for (t, s) in group {
                    println!("  ({}, {}, {})  {:.10}", t.head, t.relation, t.tail, s);
                }
            }
            println!(
                "max score spread {:.2e}, max embedding gap {:.2e}",
                rep.max_score_gap, rep.max_embedding_gap
            );
            finish_audit(&rep, out, rep.holds(), "counterexample")
        }
        "deq-trend" => {
            let trials = a.trials.unwrap_or(20);
            let scorer = RandomFeatureScorer::new(8, 2, a.seed);
            let trend = deq_trend(&scorer, trials, a.seed);
            println!(
                "gap shrank in {}/{} trials, mean log-log slope {:.3}",
                trend.shrinking, trials, trend.mean_slope
            );
            let ok = trend.shrinking * 10 >= trials * 9 && (-0.65..=-0.35).contains(&trend.mean_slope);
            finish_audit(&trend, out, ok, "deq-trend")
        }
        "uqer" => {
            let f = generate_fd2(&[a.depth], true);
            let g = KnowledgeGraph::new(f.observed.clone(), f.num_nodes, f.num_relations)?;
            let mut derived = BTreeSet::new();
            for c in fd2_clauses() {
                derived.extend(uqer_derive_with_budget(&c, &g, 10_000_000)?);
            }
            let want: BTreeSet<Triplet> = f.queries.iter().copied().collect();
            println!("derived {} triplets, generator has {}", derived.len(), want.len());
            let report = serde_json::json!({
                "depth": a.depth,
                "derived": derived.len(),
                "generator": want.len(),
                "equal": derived == want,
            });
            finish_audit(&report, out, derived == want, "uqer")
        }
        other => Err(invalid(format!(
            "unknown check {other:?}; expected invariance, equivariance, counterexample, deq-trend or uqer"
        ))),
    }
}

pub fn uqer(a: &UqerArgs) -> anyhow::Result<()> {
    let clauses = match &a.clauses {
        Some(p) => parse_clauses(&fs::read_to_string(p)?)?,
        None => fd2_clauses(),
    };
    let (g, maps) = match (&a.graph, &a.data) {
        (Some(p), _) => load_graph(p)?,
        (None, Some(d)) => {
            let b = DatasetBundle::load(d)?;
            (b.observed, b.names)
        }
        (None, None) => return Err(invalid("pass --graph or --data")),
    };
    let mut derived = BTreeSet::new();
    for c in &clauses {
        derived.extend(uqer_derive_with_budget(c, &g, a.budget)?);
    }
    let ts: Vec<Triplet> = derived.into_iter().collect();
    match &a.out {
        Some(out) => {
            write_triplets(&ts, &maps, out)?;
            println!("derived {} triplets", ts.len());
        }
        None => print!("{}", format_triplets(&ts, &maps)),
    }
    Ok(())
}
