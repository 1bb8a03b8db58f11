//! One function per subcommand. Each reads its upstream artifacts, checks
//! their provenance against the current config and writes its own artifact
//! plus a manifest naming the hashes of everything it consumed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};

use uattr::attribution::{
    loss_table, score_pixel_cosine, score_unlearning_from, InfluenceIndex, ScoreTable, INFLUENCE_PROJECTED, PIXEL_COSINE,
    SINGLE_TIMESTEP, UNLEARNING,
};
use uattr::container::{read_file, write_atomic, Checkpoint};
use uattr::data::io::{read_dataset, write_dataset};
use uattr::data::{generate, Dataset};
use uattr::eval::report::{markdown, read_curve, read_reports, summarize, svg, write_curve, write_reports};
use uattr::eval::{
    group_queries, read_queries, sample_queries, write_job_list, write_queries, Counterfactual, Encoder, Query, RetrainJob,
};
use uattr::fisher::{estimate_fisher, FisherDiagonal};
use uattr::hashing::hash_bytes;
use uattr::train::{train, write_run};
use uattr::unlearn::{unlearn, unlearned_checkpoint};
use uattr::{Error, Result};

use crate::config::{QuerySource, RunConfig};

pub struct Context {
    pub root: PathBuf,
    pub cfg: RunConfig,
    pub jobs: usize,
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::DependencyMissing(path.to_path_buf()))
    }
}

fn conflict(what: impl Into<String>) -> Error {
    Error::ProvenanceConflict(what.into())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(path, format!("{}\n", serde_json::to_string_pretty(value)?).as_bytes())
}

fn file_hash(path: &Path) -> Result<String> {
    require(path)?;
    Ok(hash_bytes(&read_file(path)?))
}

impl Context {
    fn path(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.max(1))
            .build()
            .map_err(|e| Error::Validation(e.to_string()))
    }

    fn dataset_dir(&self) -> PathBuf {
        self.path(&self.cfg.paths.dataset)
    }

    fn run_dir(&self) -> PathBuf {
        self.path(&self.cfg.paths.runs).join(&self.cfg.name)
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.run_dir().join("checkpoint.bin")
    }

    fn queries_manifest(&self) -> PathBuf {
        self.path(&self.cfg.paths.queries).with_extension("manifest.json")
    }

    fn unlearned_path(&self, q: &Query) -> PathBuf {
        self.path(&self.cfg.paths.unlearned).join(format!("{}.bin", q.id()))
    }

    fn score_path(&self, method: &str, q: &Query) -> PathBuf {
        self.path(&self.cfg.paths.scores).join(method).join(format!("{}.csv", q.id()))
    }

    fn load_dataset(&self) -> Result<Dataset> {
        let dir = self.dataset_dir();
        require(&dir.join("images.bin"))?;
        let ds = read_dataset(&dir)?;
        if ds.spec != self.cfg.dataset {
            return Err(conflict(format!("dataset in {} was generated from a different spec", dir.display())));
        }
        Ok(ds)
    }

    fn load_base(&self, ds: &Dataset) -> Result<(Checkpoint, String)> {
        let path = self.checkpoint_path();
        require(&path)?;
        let ck = Checkpoint::read(&path)?;
        let prov = &ck.header.provenance;
        if prov.get("dataset_hash") != Some(&json!(ds.content_hash())) {
            return Err(conflict(format!("{} was trained on a different dataset", path.display())));
        }
        if prov.get("train") != Some(&serde_json::to_value(&self.cfg.train)?) {
            return Err(conflict(format!("{} was trained with a different train config", path.display())));
        }
        if ck.header.diffusion != self.cfg.diffusion {
            return Err(conflict(format!("{} uses a different diffusion config", path.display())));
        }
        let hash = ck.file_hash()?;
        Ok((ck, hash))
    }

    fn load_fisher(&self, base: &Checkpoint) -> Result<(FisherDiagonal, String)> {
        let path = self.path(&self.cfg.paths.fisher);
        require(&path)?;
        let (fisher, prov) = FisherDiagonal::read(&path)?;
        if fisher.theta_hash != base.params.content_hash() {
            return Err(conflict(format!("{} was estimated at other parameters", path.display())));
        }
        if prov.get("fisher") != Some(&serde_json::to_value(&self.cfg.fisher)?) {
            return Err(conflict(format!("{} was estimated with a different fisher config", path.display())));
        }
        Ok((fisher, file_hash(&path)?))
    }

    fn load_queries(&self, base_hash: &str) -> Result<(Vec<Query>, String)> {
        let path = self.path(&self.cfg.paths.queries);
        require(&path)?;
        let manifest: Value = serde_json::from_slice(&read_file(&self.queries_manifest())?)?;
        if manifest["base_checkpoint_hash"] != json!(base_hash) {
            return Err(conflict(format!("{} were drawn from another base checkpoint", path.display())));
        }
        if manifest["queries"] != serde_json::to_value(&self.cfg.queries)? {
            return Err(conflict(format!("{} were drawn with a different query config", path.display())));
        }
        Ok((read_queries(&path)?, file_hash(&path)?))
    }

    fn load_scores(&self, method: &str, q: &Query) -> Result<ScoreTable> {
        let path = self.score_path(method, q);
        require(&path)?;
        let st = ScoreTable::read(&path)?;
        if st.query_hash != q.example.content_hash() {
            return Err(conflict(format!("{} scores another query", path.display())));
        }
        Ok(st)
    }
}

pub fn generate_cmd(ctx: &Context) -> Result<String> {
    let ds = generate(&ctx.cfg.dataset)?;
    let dir = ctx.dataset_dir();
    write_dataset(&ds, &dir)?;
    write_json(
        &dir.join("manifest.json"),
        &json!({ "dataset_hash": ds.content_hash(), "spec": ctx.cfg.dataset }),
    )?;
    Ok(format!("generated {} examples in {}", ds.len(), dir.display()))
}

pub fn train_cmd(ctx: &Context) -> Result<String> {
    let ds = ctx.load_dataset()?;
    let trained = train(&ds, &ctx.cfg.train, &ctx.cfg.diffusion)?;
    let inputs = json!({
        "dataset_manifest_hash": file_hash(&ctx.dataset_dir().join("manifest.json"))?,
        "diffusion": ctx.cfg.diffusion,
    });
    let hash = write_run(&ctx.run_dir(), &trained, inputs)?;
    let last = trained.log.last().map(|l| l.mean_loss).unwrap_or(f64::NAN);
    Ok(format!("trained {} (final loss {last:.5}, checkpoint {hash})", ctx.run_dir().display()))
}

pub fn fisher_cmd(ctx: &Context) -> Result<String> {
    let ds = ctx.load_dataset()?;
    let (base, base_hash) = ctx.load_base(&ds)?;
    let fisher = estimate_fisher(&ds, &base.params, &ctx.cfg.fisher, &ctx.cfg.diffusion)?;
    let path = ctx.path(&ctx.cfg.paths.fisher);
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))?;
    fisher.write(
        &path,
        json!({
            "base_checkpoint_hash": base_hash,
            "dataset_hash": ds.content_hash(),
            "fisher": ctx.cfg.fisher,
        }),
    )?;
    Ok(format!("fisher diagonal over {} draws, mean {:.3e}, in {}", fisher.sample_count, fisher.mean(), path.display()))
}

fn make_queries(ctx: &Context, ds: &Dataset, base: &Checkpoint) -> Result<Vec<Query>> {
    let q = &ctx.cfg.queries;
    match q.source {
        QuerySource::Sample => sample_queries(&base.params, q.count, q.seed, &ctx.cfg.diffusion),
        QuerySource::Groups => group_queries(ds, &base.params, q.t_start, q.seed, &ctx.cfg.diffusion),
    }
}

pub fn unlearn_cmd(ctx: &Context) -> Result<String> {
    let ds = ctx.load_dataset()?;
    let (base, base_hash) = ctx.load_base(&ds)?;
    let (fisher, fisher_hash) = ctx.load_fisher(&base)?;
    let queries = make_queries(ctx, &ds, &base)?;
    let qpath = ctx.path(&ctx.cfg.paths.queries);
    std::fs::create_dir_all(qpath.parent().unwrap_or(Path::new(".")))?;
    write_queries(&qpath, &queries)?;
    write_json(
        &ctx.queries_manifest(),
        &json!({ "base_checkpoint_hash": base_hash, "queries": ctx.cfg.queries }),
    )?;
    let queries_hash = file_hash(&qpath)?;
    std::fs::create_dir_all(ctx.path(&ctx.cfg.paths.unlearned))?;
    ctx.pool()?.install(|| {
        queries.par_iter().try_for_each(|q| {
            let theta = unlearn(&base.params, &fisher, &q.example, &ctx.cfg.unlearn, &ctx.cfg.diffusion)?;
            let extra = json!({ "fisher_hash": fisher_hash, "queries_hash": queries_hash });
            unlearned_checkpoint(theta, &base_hash, &q.example, &ctx.cfg.unlearn, &ctx.cfg.diffusion, extra)
                .write(&ctx.unlearned_path(q))
        })
    })?;
    Ok(format!("unlearned {} queries into {}", queries.len(), ctx.path(&ctx.cfg.paths.unlearned).display()))
}

fn with_inputs(mut st: ScoreTable, inputs: &Value) -> ScoreTable {
    st.params = json!({ "method": st.params, "inputs": inputs });
    st
}

pub fn attribute_cmd(ctx: &Context) -> Result<String> {
    let ds = ctx.load_dataset()?;
    let (base, base_hash) = ctx.load_base(&ds)?;
    let (queries, queries_hash) = ctx.load_queries(&base_hash)?;
    let methods: BTreeSet<&str> = ctx.cfg.evaluate.methods.iter().map(String::as_str).collect();
    let dcfg = &ctx.cfg.diffusion;
    let inputs = json!({
        "base_checkpoint_hash": base_hash,
        "dataset_hash": ds.content_hash(),
        "queries_hash": queries_hash,
    });

    let needs_fisher = methods.contains(UNLEARNING) || methods.contains(INFLUENCE_PROJECTED) || methods.contains(SINGLE_TIMESTEP);
    let fisher = if needs_fisher { Some(ctx.load_fisher(&base)?) } else { None };
    let base_table = if methods.contains(UNLEARNING) {
        Some(loss_table(&ds, &base.params, ctx.cfg.scoring, dcfg)?)
    } else {
        None
    };
    let index = match &fisher {
        Some((f, _)) if methods.contains(INFLUENCE_PROJECTED) || methods.contains(SINGLE_TIMESTEP) => {
            Some(InfluenceIndex::build(&ds, &base.params, f, &ctx.cfg.influence, dcfg)?)
        }
        _ => None,
    };
    let fisher_inputs = |extra: Value| {
        let mut v = inputs.clone();
        v["fisher_hash"] = json!(fisher.as_ref().map(|f| f.1.clone()));
        if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
            m.extend(e);
        }
        v
    };

    let per_query = |q: &Query| -> Result<()> {
        let mut tables = Vec::new();
        if let Some(base_table) = &base_table {
            let path = ctx.unlearned_path(q);
            require(&path)?;
            let ck = Checkpoint::read(&path)?;
            let prov = &ck.header.provenance;
            if prov.get("base_checkpoint_hash") != Some(&json!(base_hash)) || prov.get("query_hash") != Some(&json!(q.example.content_hash())) {
                return Err(conflict(format!("{} belongs to another base model or query", path.display())));
            }
            if prov.get("unlearn") != Some(&serde_json::to_value(&ctx.cfg.unlearn)?) {
                return Err(conflict(format!("{} was unlearned with a different config", path.display())));
            }
            let after = loss_table(&ds, &ck.params, ctx.cfg.scoring, dcfg)?;
            let st = score_unlearning_from(base_table, &after, &q.example)?;
            tables.push(with_inputs(st, &fisher_inputs(json!({ "unlearned_hash": ck.file_hash()? }))));
        }
        if methods.contains(PIXEL_COSINE) {
            tables.push(with_inputs(score_pixel_cosine(&ds, &q.example, ctx.cfg.scoring.flip)?, &inputs));
        }
        if let Some(index) = &index {
            if methods.contains(INFLUENCE_PROJECTED) {
                tables.push(with_inputs(index.score(&q.example)?, &fisher_inputs(json!({}))));
            }
            if methods.contains(SINGLE_TIMESTEP) {
                let st = index.score_single_timestep(&q.example, ctx.cfg.evaluate.t_fixed)?;
                tables.push(with_inputs(st, &fisher_inputs(json!({}))));
            }
        }
        for st in tables {
            let path = ctx.score_path(&st.method, q);
            std::fs::create_dir_all(path.parent().expect("score path has a parent"))?;
            st.write(&path)?;
        }
        Ok(())
    };
    ctx.pool()?.install(|| queries.par_iter().try_for_each(per_query))?;
    Ok(format!(
        "scored {} queries with {} method(s) into {}",
        queries.len(),
        methods.len(),
        ctx.path(&ctx.cfg.paths.scores).display()
    ))
}

fn load_encoder(ctx: &Context, ds: &Dataset) -> Result<(Encoder, String)> {
    let path = ctx.path(&ctx.cfg.paths.encoder);
    let expected = json!({ "dataset_hash": ds.content_hash(), "encoder": ctx.cfg.encoder });
    if path.exists() {
        if let Ok((enc, prov)) = Encoder::read(&path).map(|e| (e, read_encoder_provenance(&path))) {
            if prov.as_ref() == Some(&expected) {
                return Ok((enc, file_hash(&path)?));
            }
        }
    }
    let enc = Encoder::train(ds, &ctx.cfg.encoder)?;
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))?;
    enc.write(&path, expected.clone())?;
    write_json(&path.with_extension("manifest.json"), &expected)?;
    Ok((enc, file_hash(&path)?))
}

fn read_encoder_provenance(path: &Path) -> Option<Value> {
    let bytes = std::fs::read(path.with_extension("manifest.json")).ok()?;
    serde_json::from_slice(&bytes).ok()
}

pub fn evaluate_cmd(ctx: &Context) -> Result<String> {
    let ds = ctx.load_dataset()?;
    let (base, base_hash) = ctx.load_base(&ds)?;
    let (queries, queries_hash) = ctx.load_queries(&base_hash)?;
    let (encoder, encoder_hash) = load_encoder(ctx, &ds)?;
    let ecfg = &ctx.cfg.evaluate;
    let eval_dir = ctx.path(&ctx.cfg.paths.eval);
    let mut cf = Counterfactual::new(&ds, &base, &ctx.cfg.train, &ctx.cfg.diffusion, &encoder)?.with_cache(eval_dir.join("retrain"));
    cf.loss_seed = ecfg.loss_seed;
    cf.stride = ecfg.stride;

    let mut tables: BTreeMap<(String, u64), ScoreTable> = BTreeMap::new();
    let mut score_hashes = BTreeMap::new();
    for m in &ecfg.methods {
        for q in &queries {
            tables.insert((m.clone(), q.id()), ctx.load_scores(m, q)?);
            score_hashes.insert(format!("{m}/{}", q.id()), file_hash(&ctx.score_path(m, q))?);
        }
    }

    let mut jobs: Vec<RetrainJob> = cf.random_jobs(&ecfg.k_grid, ecfg.models_per_k, ecfg.random_seed)?;
    for st in tables.values() {
        for &k in ecfg.k_grid.iter().filter(|&&k| k > 0) {
            jobs.push(cf.job(&cf.removal(st, k)?)?);
        }
    }
    let mut seen = BTreeSet::new();
    jobs.retain(|j| seen.insert(j.key.clone()));
    std::fs::create_dir_all(&eval_dir)?;
    write_job_list(&eval_dir.join("jobs.json"), &jobs)?;
    cf.run_jobs(&jobs, ctx.jobs)?;

    let mut grid = ecfg.k_grid.clone();
    if grid.first() != Some(&0) {
        grid.insert(0, 0);
    }
    let (curve, mut reports) = cf.random_reference(&grid, ecfg.models_per_k, &queries, ecfg.random_seed)?;
    for m in &ecfg.methods {
        for &k in &ecfg.k_grid {
            for q in &queries {
                reports.extend(cf.eval_leave_k(&tables[&(m.clone(), q.id())], k, std::slice::from_ref(q))?);
            }
        }
    }
    write_reports(&eval_dir.join("reports.csv"), &reports)?;
    write_curve(&eval_dir.join("random_curve.csv"), &curve)?;
    write_json(
        &eval_dir.join("manifest.json"),
        &json!({
            "base_checkpoint_hash": base_hash,
            "queries_hash": queries_hash,
            "encoder_hash": encoder_hash,
            "score_hashes": score_hashes,
            "evaluate": ecfg,
            "train": ctx.cfg.train,
            "retrain_jobs": jobs.len(),
        }),
    )?;
    Ok(format!(
        "evaluated {} queries, {} retrained models, {} reports in {}",
        queries.len(),
        jobs.len(),
        reports.len(),
        eval_dir.display()
    ))
}

pub fn report_cmd(ctx: &Context) -> Result<String> {
    let eval_dir = ctx.path(&ctx.cfg.paths.eval);
    let reports_path = eval_dir.join("reports.csv");
    let curve_path = eval_dir.join("random_curve.csv");
    require(&reports_path)?;
    require(&curve_path)?;
    let reports = read_reports(&reports_path)?;
    let curve = read_curve(&curve_path)?;
    let methods: Vec<_> = reports.iter().filter(|r| r.method != uattr::attribution::RANDOM).cloned().collect();
    let summary = summarize(&methods, Some(&curve))?;
    let dir = ctx.path(&ctx.cfg.paths.report);
    std::fs::create_dir_all(&dir)?;
    write_atomic(&dir.join("report.md"), markdown(&summary, Some(&curve)).as_bytes())?;
    write_atomic(&dir.join("delta_loss.svg"), svg(&summary, Some(&curve)).as_bytes())?;
    write_json(&dir.join("summary.json"), &serde_json::to_value(&summary)?)?;
    write_json(
        &dir.join("manifest.json"),
        &json!({
            "reports_hash": file_hash(&reports_path)?,
            "curve_hash": file_hash(&curve_path)?,
        }),
    )?;
    Ok(format!("wrote {} summary rows to {}", summary.len(), dir.display()))
}
