//! The stage graph. Each stage writes one directory and a manifest keyed by
//! its own configuration and the keys of the stages it reads.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use factrace_core::attribution::{
    embed_repr, gradient_blocks, gradient_tag_blocks, ActivationTag, BlockScoreTable, EmbedRepr, FoldOptions,
    TableBuilder,
};
use factrace_core::bm25::{tokenize_for_bm25, Bm25Index};
use factrace_core::eval::{
    aggregate, build_candidate_set, decode_queries, evaluate_query, random_target_scores, rank_candidates,
    slice_queries, CandidateConfig, CandidateSet, EvalReport, Level, QueryDecodes, QuerySlice, SliceKind,
};
use factrace_core::model::{
    answer_correct, config_hash, dot, encode_example, select_checkpoints, train, AdafactorState, Checkpoint,
    CheckpointRecord, EncodedExample, Phase, Transformer, TrainingHistory, Vocab,
};
use factrace_core::synthgen::{
    build_bundle, ingest_external, read_bundle, write_bundle, DatasetBundle, ExampleId, MaskedExample, Role,
    EXAMPLES_FILE, MANIFEST_FILE,
};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, digest, RunConfig};
use crate::store::{self, read_json, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Gen,
    Pretrain,
    Finetune,
    Select,
    Bm25,
    Score,
    Eval,
    Sweep,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Select => "ckpt-select",
            Stage::Bm25 => "bm25",
            Stage::Score => "score",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep-layers",
            Stage::Report => "report",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Gen => &[],
            Stage::Pretrain => &[Stage::Gen],
            Stage::Finetune => &[Stage::Pretrain],
            Stage::Select => &[Stage::Pretrain, Stage::Finetune],
            Stage::Bm25 => &[Stage::Gen],
            Stage::Score => &[Stage::Select, Stage::Bm25],
            Stage::Eval => &[Stage::Score],
            Stage::Sweep => &[Stage::Score],
            Stage::Report => &[Stage::Eval],
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Options {
    /// Rerun stages even when their output is up to date.
    pub force: bool,
    /// Write per-query rankings next to the eval report.
    pub dump_rankings: bool,
    /// Start fine-tuning from this checkpoint instead of the pretrained one.
    pub finetune_from: Option<PathBuf>,
    /// Tag sets for the layer sweep; comma-joined tags are summed.
    pub sweep: Vec<String>,
}

/// What the checkpoint-selection stage records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    pub config_hash: String,
    /// Fine-tuning checkpoints used for TracIn.
    pub steps: Vec<u64>,
    pub pretrain_first: u64,
    pub pretrain_final: u64,
    pub finetune_final: u64,
    /// Top-1 query accuracy of the final pretraining checkpoint.
    pub accuracy_before: f64,
    /// Top-1 query accuracy of the final fine-tuning checkpoint.
    pub accuracy_after: f64,
    pub decodes_finetune: Vec<QueryDecodes>,
    pub decodes_pretrain: Vec<QueryDecodes>,
    pub slices: Vec<QuerySlice>,
}

impl Selection {
    pub fn slice(&self, kind: SliceKind) -> Result<&QuerySlice> {
        self.slices
            .iter()
            .find(|s| s.kind == kind)
            .ok_or_else(|| anyhow!("no {kind} slice recorded"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Candidates {
    pub config_hash: String,
    pub sets: Vec<CandidateSet>,
    /// Queries without proponents, left out of every metric.
    pub excluded: Vec<ExampleId>,
}

/// Summary written by the report stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub slice: String,
    pub slice_size: usize,
    pub eval: EvalReport,
    pub sweep: Option<EvalReport>,
}

const HISTORY: &str = "history.json";
const SELECTION: &str = "selection.json";
const INDEX: &str = "index.json";
const CANDIDATES: &str = "candidates.json";
const TOPK: &str = "topk.tsv";
const EMBED: &str = "embed.tsv";
const SCORED: &str = "queries.json";

pub struct Pipeline {
    pub config: RunConfig,
    pub options: Options,
    ran: BTreeSet<Stage>,
}

impl Pipeline {
    pub fn new(config: RunConfig, options: Options) -> Self {
        Pipeline {
            config,
            options,
            ran: BTreeSet::new(),
        }
    }

    /// Stages that executed (rather than being reused) so far.
    pub fn ran(&self) -> &BTreeSet<Stage> {
        &self.ran
    }

    pub fn dir(&self, stage: Stage) -> PathBuf {
        let p = &self.config.paths;
        let cache = self.config.cache_dir();
        match stage {
            Stage::Gen => p.bundle.clone(),
            Stage::Pretrain => p.checkpoints.join("pretrain"),
            Stage::Finetune => p.checkpoints.join("finetune"),
            Stage::Select => cache.join("select"),
            Stage::Bm25 => cache.join("bm25"),
            Stage::Score => cache.join("scores"),
            Stage::Eval => p.reports.join("eval"),
            Stage::Sweep => p.reports.join("sweep"),
            Stage::Report => p.reports.clone(),
        }
    }

    fn sweep_sets(&self) -> Vec<String> {
        if self.options.sweep.is_empty() {
            self.config.attribution.sweep.clone()
        } else {
            self.options.sweep.clone()
        }
    }

    fn need_tracin(&self) -> bool {
        let m = &self.config.eval.methods;
        m.iter().any(|m| m == "tracin" || m == "ensemble")
            || self.sweep_sets().iter().flat_map(|s| s.split(',')).any(|t| t.starts_with('G'))
    }

    fn need_embed(&self) -> bool {
        let m = &self.config.eval.methods;
        m.iter().any(|m| m == "embed" || m == "ensemble")
            || self.sweep_sets().iter().flat_map(|s| s.split(',')).any(|t| t.starts_with('A'))
    }

    /// Hash of everything a stage's output depends on.
    pub fn key(&self, stage: Stage) -> Result<String> {
        let c = &self.config;
        let own: String = match stage {
            Stage::Gen => {
                let external = match &c.generation.external {
                    Some(p) => store::file_hash(p)?,
                    None => String::new(),
                };
                format!("{}|{}|{}", json(&c.generation), external, c.gen_config().seed)
            }
            Stage::Pretrain => format!(
                "{}|{}|{}|{}|{}|{}",
                json(&c.model),
                c.train.pretrain_epochs,
                c.train.batch_size,
                c.train.checkpoint_every,
                json(&c.train.optimizer),
                c.seed
            ),
            Stage::Finetune => {
                let from = match &self.options.finetune_from {
                    Some(p) => store::file_hash(p)?,
                    None => String::new(),
                };
                format!(
                    "{}|{}|{}|{}|{}|{}",
                    c.train.finetune_epochs,
                    c.train.batch_size,
                    c.train.checkpoint_every,
                    json(&c.train.optimizer),
                    c.seed,
                    from
                )
            }
            Stage::Select => format!("{}", c.attribution.checkpoints),
            Stage::Bm25 => format!(
                "{}|{}|{}|{}|{}",
                json(&c.eval.bm25),
                c.eval.bm25_top_k,
                c.eval.same_target,
                c.eval.random,
                c.seed
            ),
            Stage::Score => format!("{}|{}|{}", c.eval.slice, self.need_tracin(), self.need_embed()),
            Stage::Eval => {
                let mut a = c.attribution.clone();
                a.sweep.clear();
                a.query_chunk = 0;
                format!("{}|{}|{}", json(&c.eval), json(&a), self.options.dump_rankings)
            }
            Stage::Sweep => {
                let mut a = c.attribution.clone();
                a.sweep.clear();
                a.query_chunk = 0;
                format!("{}|{}|{:?}", json(&c.eval), json(&a), self.sweep_sets())
            }
            Stage::Report => format!("{:?}", self.sweep_sets()),
        };
        let mut parts: Vec<Vec<u8>> = vec![stage.name().as_bytes().to_vec(), own.into_bytes()];
        for d in self.deps_of(stage) {
            parts.push(self.key(d)?.into_bytes());
        }
        let refs: Vec<&[u8]> = parts.iter().map(|p| p.as_slice()).collect();
        Ok(digest(&refs))
    }

    fn report_deps(&self) -> Vec<Stage> {
        let mut deps = vec![Stage::Eval];
        if !self.sweep_sets().is_empty() {
            deps.push(Stage::Sweep);
        }
        deps
    }

    fn deps_of(&self, stage: Stage) -> Vec<Stage> {
        match stage {
            Stage::Report => self.report_deps(),
            Stage::Finetune if self.options.finetune_from.is_some() => vec![Stage::Gen],
            _ => stage.deps().to_vec(),
        }
    }

    /// Brings `stage` and everything upstream of it up to date.
    pub fn ensure(&mut self, stage: Stage) -> Result<()> {
        for d in self.deps_of(stage) {
            self.ensure(d)?;
        }
        let upstream_ran = self.deps_of(stage).iter().any(|d| self.ran.contains(d));
        self.run_stage(stage, upstream_ran)
    }

    /// Runs `stage` alone; upstream output must already be up to date.
    pub fn run_single(&mut self, stage: Stage) -> Result<()> {
        for d in self.deps_of(stage) {
            let key = self.key(d)?;
            store::verify(&self.dir(d), d.name(), &key)
                .with_context(|| format!("{} needs up-to-date {} output; run `{}` first", stage.name(), d.name(), d.name()))?;
        }
        self.run_stage(stage, false)
    }

    fn run_stage(&mut self, stage: Stage, upstream_ran: bool) -> Result<()> {
        let key = self.key(stage)?;
        let dir = self.dir(stage);
        if !self.options.force && !upstream_ran && store::verify(&dir, stage.name(), &key).is_ok() {
            info!("{}: up to date", stage.name());
            return Ok(());
        }
        let start = Instant::now();
        info!("{}: running", stage.name());
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        store::invalidate(&dir)?;
        let files = self
            .execute(stage, &dir)
            .with_context(|| format!("stage {} failed", stage.name()))?;
        store::write_manifest(&dir, stage.name(), &key, &self.config.hash(), &files)?;
        info!("{}: done in {:.1?}", stage.name(), start.elapsed());
        self.ran.insert(stage);
        Ok(())
    }

    fn execute(&self, stage: Stage, dir: &Path) -> Result<Vec<String>> {
        match stage {
            Stage::Gen => self.gen(dir),
            Stage::Pretrain => self.pretrain(dir),
            Stage::Finetune => self.finetune(dir),
            Stage::Select => self.select(dir),
            Stage::Bm25 => self.bm25(dir),
            Stage::Score => self.score(dir),
            Stage::Eval => self.eval(dir),
            Stage::Sweep => self.sweep(dir),
            Stage::Report => self.report(dir),
        }
    }

    // ---- loading ----

    pub fn load_bundle(&self) -> Result<DatasetBundle> {
        Ok(read_bundle(&self.dir(Stage::Gen))?)
    }

    pub fn load_model(&self, bundle: &DatasetBundle) -> Result<ModelContext> {
        let vocab = Vocab::from_bundle(bundle);
        let config = self.config.model_config(vocab.len());
        let hash = config_hash(&config, &vocab);
        let model = Transformer::new(config)?;
        Ok(ModelContext { vocab, model, hash })
    }

    pub fn load_history(&self, stage: Stage) -> Result<TrainingHistory> {
        read_json(&self.dir(stage).join(HISTORY))
    }

    pub fn load_checkpoint(&self, stage: Stage, step: u64, hash: &str) -> Result<Checkpoint> {
        let path = self.dir(stage).join(checkpoint_file(step));
        Checkpoint::load(&path, Some(hash)).with_context(|| format!("loading {}", path.display()))
    }

    pub fn load_selection(&self) -> Result<Selection> {
        read_json(&self.dir(Stage::Select).join(SELECTION))
    }

    pub fn load_candidates(&self) -> Result<Candidates> {
        read_json(&self.dir(Stage::Bm25).join(CANDIDATES))
    }

    pub fn load_index(&self) -> Result<Bm25Index> {
        Ok(Bm25Index::load(&self.dir(Stage::Bm25).join(INDEX))?)
    }

    pub fn load_eval(&self) -> Result<EvalReport> {
        read_json(&self.dir(Stage::Eval).join("eval.json"))
    }

    pub fn load_run_report(&self) -> Result<RunReport> {
        read_json(&self.dir(Stage::Report).join("report.json"))
    }

    /// Queries that were scored, in order.
    pub fn load_scored_queries(&self) -> Result<Vec<ExampleId>> {
        read_json(&self.dir(Stage::Score).join(SCORED))
    }

    pub fn load_table(&self, query: ExampleId) -> Result<BlockScoreTable> {
        let path = self.dir(Stage::Score).join(table_file(query));
        let f = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        Ok(BlockScoreTable::read_tsv(BufReader::new(f))?)
    }

    /// Per query, candidate and activation tag: the embedding cosine.
    pub fn load_embed(&self) -> Result<BTreeMap<(ExampleId, ExampleId), BTreeMap<String, f64>>> {
        let path = self.dir(Stage::Score).join(EMBED);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let mut out: BTreeMap<(ExampleId, ExampleId), BTreeMap<String, f64>> = BTreeMap::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                bail!("{}:{}: expected 4 columns", path.display(), n + 1);
            }
            let q = ExampleId(cols[0].parse()?);
            let c = ExampleId(cols[1].parse()?);
            out.entry((q, c)).or_default().insert(cols[2].to_string(), cols[3].parse()?);
        }
        Ok(out)
    }

    // ---- stages ----

    fn gen(&self, dir: &Path) -> Result<Vec<String>> {
        let bundle = match &self.config.generation.external {
            Some(p) => ingest_external(p)?,
            None => build_bundle(&self.config.gen_config())?,
        };
        bundle.validate()?;
        write_bundle(&bundle, dir)?;
        let s = bundle.stats();
        info!(
            "gen: {} attribution examples, {} queries, {} query facts, {:.1} proponents per fact",
            s.attribution_examples, s.query_examples, s.query_facts, s.avg_proponents
        );
        Ok(vec![EXAMPLES_FILE.into(), MANIFEST_FILE.into()])
    }

    fn encode_all<'a>(
        &self,
        ctx: &ModelContext,
        examples: impl Iterator<Item = &'a MaskedExample>,
    ) -> Result<Vec<EncodedExample>> {
        let eos = ctx.model.config().include_eos_in_target;
        examples
            .map(|e| encode_example(&ctx.vocab, e, eos).map_err(Into::into))
            .collect()
    }

    fn pretrain(&self, dir: &Path) -> Result<Vec<String>> {
        clear_checkpoints(dir)?;
        let bundle = self.load_bundle()?;
        let ctx = self.load_model(&bundle)?;
        let examples = self.encode_all(&ctx, bundle.pretrain_examples())?;
        let mut files = Vec::new();
        let history = if self.config.train.pretrain_epochs == 0 {
            // No pretraining: the initialization stands in as the pretrained model.
            let ckpt = initial_checkpoint(&ctx, &examples)?;
            ckpt.save(&dir.join(checkpoint_file(0)))?;
            files.push(checkpoint_file(0));
            TrainingHistory {
                phase: Phase::Pretrain,
                step_losses: Vec::new(),
                checkpoints: vec![CheckpointRecord {
                    phase: Phase::Pretrain,
                    step: 0,
                    train_loss: ckpt.train_loss,
                }],
            }
        } else {
            let mut tc = self.config.train_config(self.config.train.pretrain_epochs);
            tc.seed = derive_seed(self.config.seed, "train.pretrain");
            let (_, history) = train(&ctx.model, None, &examples, Phase::Pretrain, &tc, &ctx.hash, |ck| {
                let name = checkpoint_file(ck.step);
                ck.save(&dir.join(&name))?;
                files.push(name);
                Ok(())
            })?;
            history
        };
        write_json(&dir.join(HISTORY), &history)?;
        files.push(HISTORY.into());
        Ok(files)
    }

    fn finetune(&self, dir: &Path) -> Result<Vec<String>> {
        clear_checkpoints(dir)?;
        let bundle = self.load_bundle()?;
        let ctx = self.load_model(&bundle)?;
        let start = match &self.options.finetune_from {
            Some(p) => Checkpoint::load(p, Some(&ctx.hash))?,
            None => {
                let pre = self.load_history(Stage::Pretrain)?;
                let last = pre.checkpoints.last().ok_or_else(|| anyhow!("pretraining saved no checkpoint"))?;
                self.load_checkpoint(Stage::Pretrain, last.step, &ctx.hash)?
            }
        };
        let examples = self.encode_all(&ctx, bundle.attribution.iter())?;
        let mut tc = self.config.train_config(self.config.train.finetune_epochs);
        tc.seed = derive_seed(self.config.seed, "train.finetune");
        let mut files = Vec::new();
        let (_, history) = train(&ctx.model, Some(&start), &examples, Phase::Finetune, &tc, &ctx.hash, |ck| {
            let name = checkpoint_file(ck.step);
            ck.save(&dir.join(&name))?;
            files.push(name);
            Ok(())
        })?;
        write_json(&dir.join(HISTORY), &history)?;
        files.push(HISTORY.into());
        Ok(files)
    }

    fn select(&self, dir: &Path) -> Result<Vec<String>> {
        let bundle = self.load_bundle()?;
        let ctx = self.load_model(&bundle)?;
        let pre = self.load_history(Stage::Pretrain)?;
        let fine = self.load_history(Stage::Finetune)?;
        let k = self.config.attribution.checkpoints.min(fine.checkpoints.len());
        if k < self.config.attribution.checkpoints {
            log::warn!("only {k} fine-tuning checkpoints were saved");
        }
        let steps: Vec<u64> = select_checkpoints(&fine.checkpoints, k)?.iter().map(|r| r.step).collect();
        let first = pre.checkpoints.first().ok_or_else(|| anyhow!("empty pretraining history"))?.step;
        let pre_final = pre.checkpoints.last().expect("non-empty").step;
        let fine_final = fine.checkpoints.last().ok_or_else(|| anyhow!("empty fine-tuning history"))?.step;
        let first_ck = self.load_checkpoint(Stage::Pretrain, first, &ctx.hash)?;
        let pre_ck = self.load_checkpoint(Stage::Pretrain, pre_final, &ctx.hash)?;
        let fine_ck = self.load_checkpoint(Stage::Finetune, fine_final, &ctx.hash)?;
        let decodes_finetune = decode_queries(&ctx.model, &ctx.vocab, &bundle, &pre_ck.params, &fine_ck.params)?;
        let decodes_pretrain = decode_queries(&ctx.model, &ctx.vocab, &bundle, &first_ck.params, &pre_ck.params)?;
        let accuracy = |pick: &dyn Fn(&QueryDecodes) -> Option<&str>| -> Result<f64> {
            let mut ok = 0usize;
            for d in &decodes_finetune {
                let q = bundle.example(d.query).ok_or_else(|| anyhow!("unknown query {}", d.query))?;
                let fact = bundle
                    .fact(q.facts[0].fact_id)
                    .ok_or_else(|| anyhow!("unknown fact for query {}", d.query))?;
                if pick(d).is_some_and(|a| answer_correct(a, fact, Role::Object)) {
                    ok += 1;
                }
            }
            Ok(ok as f64 / decodes_finetune.len().max(1) as f64)
        };
        let accuracy_before = accuracy(&|d| d.before.first().map(String::as_str))?;
        let accuracy_after = accuracy(&|d| Some(d.after.as_str()))?;
        let slices = vec![
            slice_queries(&bundle, &decodes_finetune, SliceKind::FinetuneLearned)?,
            slice_queries(&bundle, &decodes_pretrain, SliceKind::PretrainLearned)?,
            slice_queries(&bundle, &[], SliceKind::All)?,
        ];
        info!(
            "ckpt-select: steps {steps:?}; accuracy {accuracy_before:.3} -> {accuracy_after:.3}; FL slice {}",
            slices[0].members.len()
        );
        let selection = Selection {
            config_hash: self.config.hash(),
            steps,
            pretrain_first: first,
            pretrain_final: pre_final,
            finetune_final: fine_final,
            accuracy_before,
            accuracy_after,
            decodes_finetune,
            decodes_pretrain,
            slices,
        };
        write_json(&dir.join(SELECTION), &selection)?;
        Ok(vec![SELECTION.into()])
    }

    pub fn candidate_config(&self) -> CandidateConfig {
        CandidateConfig {
            bm25_top_k: self.config.eval.bm25_top_k,
            same_target: self.config.eval.same_target,
            random: self.config.eval.random,
            seed: derive_seed(self.config.seed, "candidates"),
        }
    }

    fn bm25(&self, dir: &Path) -> Result<Vec<String>> {
        let bundle = self.load_bundle()?;
        let index = Bm25Index::from_examples(&bundle.attribution, self.config.eval.bm25)?;
        index.save(&dir.join(INDEX))?;
        let cfg = self.candidate_config();
        let mut sets = Vec::new();
        let mut excluded = Vec::new();
        let mut topk = BufWriter::new(fs::File::create(dir.join(TOPK))?);
        writeln!(topk, "query_id\trank\texample_id\tscore")?;
        for q in &bundle.queries {
            for (rank, (id, score)) in index.top_k(&tokenize_for_bm25(q), cfg.bm25_top_k).iter().enumerate() {
                writeln!(topk, "{}\t{}\t{}\t{:?}", q.example_id, rank + 1, id, score)?;
            }
            let has_proponents = q
                .facts
                .first()
                .and_then(|f| bundle.proponents_of(f.fact_id))
                .is_some_and(|p| !p.is_empty());
            if has_proponents {
                sets.push(build_candidate_set(q, &bundle, &index, &cfg)?);
            } else {
                excluded.push(q.example_id);
            }
        }
        topk.flush()?;
        if !excluded.is_empty() {
            log::warn!("{} queries have no proponents and are excluded", excluded.len());
        }
        let candidates = Candidates {
            config_hash: self.config.hash(),
            sets,
            excluded,
        };
        write_json(&dir.join(CANDIDATES), &candidates)?;
        Ok(vec![INDEX.into(), CANDIDATES.into(), TOPK.into()])
    }

    /// Candidate sets of the configured slice's members, in query order.
    fn slice_sets(&self, selection: &Selection, candidates: &Candidates) -> Result<Vec<CandidateSet>> {
        let members: BTreeSet<ExampleId> = selection.slice(self.config.eval.slice)?.members.iter().copied().collect();
        Ok(candidates
            .sets
            .iter()
            .filter(|s| members.contains(&s.query))
            .cloned()
            .collect())
    }

    fn score(&self, dir: &Path) -> Result<Vec<String>> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "tsv") {
                fs::remove_file(path)?;
            }
        }
        let bundle = self.load_bundle()?;
        let ctx = self.load_model(&bundle)?;
        let selection = self.load_selection()?;
        let candidates = self.load_candidates()?;
        let sets = self.slice_sets(&selection, &candidates)?;
        let query_ids: Vec<ExampleId> = sets.iter().map(|s| s.query).collect();
        let mut files = vec![SCORED.to_string()];
        write_json(&dir.join(SCORED), &query_ids)?;
        if sets.is_empty() {
            log::warn!("score: the {} slice is empty", self.config.eval.slice);
        }

        let example = |id: ExampleId| bundle.example(id).ok_or_else(|| anyhow!("unknown example {id}"));
        let eos = ctx.model.config().include_eos_in_target;
        let pool_ids: Vec<ExampleId> = sets
            .iter()
            .flat_map(|s| s.candidates.iter().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let pool_pos: BTreeMap<ExampleId, usize> = pool_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let pool_enc: Vec<EncodedExample> = pool_ids
            .iter()
            .map(|&id| Ok(encode_example(&ctx.vocab, example(id)?, eos)?))
            .collect::<Result<_>>()?;
        let query_enc: Vec<EncodedExample> = query_ids
            .iter()
            .map(|&id| Ok(encode_example(&ctx.vocab, example(id)?, eos)?))
            .collect::<Result<_>>()?;
        let members: Vec<Vec<usize>> = sets
            .iter()
            .map(|s| s.candidates.iter().map(|c| pool_pos[c]).collect())
            .collect();

        if self.need_tracin() && !sets.is_empty() {
            let checkpoints: Vec<Checkpoint> = selection
                .steps
                .iter()
                .map(|&s| self.load_checkpoint(Stage::Finetune, s, &ctx.hash))
                .collect::<Result<_>>()?;
            let builder = TableBuilder {
                model: &ctx.model,
                checkpoints: &checkpoints,
                precondition: true,
                query_chunk: self.config.attribution.query_chunk,
            };
            let pool: Vec<(ExampleId, &EncodedExample)> = pool_ids.iter().copied().zip(pool_enc.iter()).collect();
            let groups = split(query_ids.len(), self.config.workers);
            let tables: Vec<Vec<BlockScoreTable>> = std::thread::scope(|scope| {
                let handles: Vec<_> = groups
                    .iter()
                    .map(|r| {
                        let qs: Vec<&EncodedExample> = query_enc[r.clone()].iter().collect();
                        let ms = &members[r.clone()];
                        let (builder, pool) = (&builder, &pool);
                        scope.spawn(move || builder.build(&qs, pool, ms))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("scoring worker panicked"))
                    .collect::<std::result::Result<_, _>>()
            })?;
            for (q, table) in query_ids.iter().zip(tables.into_iter().flatten()) {
                let name = table_file(*q);
                let mut w = BufWriter::new(fs::File::create(dir.join(&name))?);
                table.write_tsv(&mut w)?;
                w.flush()?;
                files.push(name);
            }
        }

        if self.need_embed() && !sets.is_empty() {
            let last = self.load_checkpoint(Stage::Finetune, selection.finetune_final, &ctx.hash)?;
            let reprs = |encs: &[EncodedExample]| -> Result<Vec<EmbedRepr>> {
                encs.iter().map(|e| Ok(embed_repr(&ctx.model, &last, e)?)).collect()
            };
            let pool_repr = reprs(&pool_enc)?;
            let query_repr = reprs(&query_enc)?;
            let tags = ActivationTag::all(ctx.model.config());
            let mut w = BufWriter::new(fs::File::create(dir.join(EMBED))?);
            writeln!(w, "query_id\tcandidate_id\ttag\tcosine")?;
            for ((q, qr), m) in query_ids.iter().zip(&query_repr).zip(&members) {
                for &p in m {
                    for tag in &tags {
                        let (a, b) = (&qr[tag], &pool_repr[p][tag]);
                        let cos = factrace_core::attribution::cosine_from_parts(dot(a, b), dot(a, a).sqrt(), dot(b, b).sqrt());
                        writeln!(w, "{}\t{}\t{}\t{:?}", q, pool_ids[p], tag, cos)?;
                    }
                }
            }
            w.flush()?;
            files.push(EMBED.into());
        }
        Ok(files)
    }

    /// Scores for every scored query under `method`, parallel to its candidates.
    pub fn method_scores(&self, method: &str, inputs: &EvalInputs) -> Result<Vec<Vec<f64>>> {
        let c = &self.config.attribution;
        match method {
            "tracin" => self.tracin_scores(&c.layers, inputs),
            "embed" => self.embed_scores(&c.embed_layers, inputs),
            "ensemble" => {
                let a = self.tracin_scores(&c.layers, inputs)?;
                let b = self.embed_scores(&c.embed_layers, inputs)?;
                a.iter()
                    .zip(&b)
                    .map(|(x, y)| Ok(factrace_core::attribution::ensemble_scores(x, y)?))
                    .collect()
            }
            "bm25" => inputs
                .sets
                .iter()
                .map(|s| {
                    let q = tokenize_for_bm25(inputs.example(s.query)?);
                    s.candidates.iter().map(|&c| Ok(inputs.index.score(&q, c)?)).collect()
                })
                .collect(),
            "random-target" => inputs
                .sets
                .iter()
                .map(|s| {
                    let cands = s.candidates.iter().map(|&c| inputs.example(c)).collect::<Result<Vec<_>>>()?;
                    Ok(random_target_scores(inputs.example(s.query)?, &cands))
                })
                .collect(),
            other => bail!("unknown method {other:?}"),
        }
    }

    fn fold_options(&self, tags: &[String], inputs: &EvalInputs) -> Result<FoldOptions> {
        let c = &self.config.attribution;
        let model = inputs.model_config();
        Ok(FoldOptions {
            normalize: c.normalize,
            precondition: c.precondition,
            order: c.order,
            steps: c.steps.clone(),
            blocks: gradient_blocks(model, tags)?,
        })
    }

    pub fn tracin_scores(&self, tags: &[String], inputs: &EvalInputs) -> Result<Vec<Vec<f64>>> {
        let opts = self.fold_options(tags, inputs)?;
        let tables = inputs.tables.as_ref().ok_or_else(|| anyhow!("no TracIn score tables were built"))?;
        tables.iter().map(|t| Ok(t.fold(&opts)?)).collect()
    }

    pub fn embed_scores(&self, tags: &[String], inputs: &EvalInputs) -> Result<Vec<Vec<f64>>> {
        if tags.is_empty() {
            bail!("no embedding layer tags given");
        }
        let model = inputs.model_config();
        let names = tags
            .iter()
            .map(|t| Ok(ActivationTag::parse(model, t)?.to_string()))
            .collect::<Result<Vec<_>>>()?;
        let embed = inputs.embed.as_ref().ok_or_else(|| anyhow!("no embedding scores were computed"))?;
        inputs
            .sets
            .iter()
            .map(|s| {
                s.candidates
                    .iter()
                    .map(|&c| {
                        let row = embed
                            .get(&(s.query, c))
                            .ok_or_else(|| anyhow!("no embedding score for query {} candidate {c}", s.query))?;
                        names.iter().map(|n| row.get(n).copied().ok_or_else(|| anyhow!("tag {n} missing"))).sum()
                    })
                    .collect()
            })
            .collect()
    }

    /// Everything the eval and sweep stages read.
    pub fn eval_inputs(&self) -> Result<EvalInputs> {
        let bundle = self.load_bundle()?;
        let ctx = self.load_model(&bundle)?;
        let selection = self.load_selection()?;
        let candidates = self.load_candidates()?;
        let scored = self.load_scored_queries()?;
        let sets = self.slice_sets(&selection, &candidates)?;
        if sets.iter().map(|s| s.query).ne(scored.iter().copied()) {
            bail!("score cache does not match the current candidate sets; rerun `score`");
        }
        let tables = if self.need_tracin() {
            Some(scored.iter().map(|&q| self.load_table(q)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let embed = if self.need_embed() && !scored.is_empty() {
            Some(self.load_embed()?)
        } else {
            None
        };
        Ok(EvalInputs {
            index: self.load_index()?,
            bundle,
            model_config: ctx.model.config().clone(),
            selection,
            sets,
            tables,
            embed,
        })
    }

    /// Evaluates `scores` (per scored query) and appends summaries to `report`.
    pub fn evaluate(
        &self,
        inputs: &EvalInputs,
        method: &str,
        scores: &[Vec<f64>],
        report: &mut EvalReport,
    ) -> Result<()> {
        let e = &self.config.eval;
        for &seed in &e.seeds {
            let tie_seed = derive_seed(self.config.seed, &format!("eval.{seed}.ties"));
            let sub_seed = derive_seed(self.config.seed, &format!("eval.{seed}.subsample"));
            for &level in &e.levels {
                let results = par_map(self.config.workers, inputs.sets.len(), |i| {
                    let s = &inputs.sets[i];
                    Ok(evaluate_query(
                        &inputs.bundle,
                        inputs.example(s.query)?,
                        &s.candidates,
                        &scores[i],
                        level,
                        method,
                        tie_seed,
                        e.k,
                    )?)
                })?;
                let per_query: Vec<_> = results.into_iter().flatten().collect();
                if per_query.is_empty() {
                    log::warn!("{method}: no evaluable queries at {level:?} level");
                    continue;
                }
                let m = e.subsample_size.min(per_query.len());
                let summary = aggregate(&per_query, e.subsamples, m, sub_seed)?;
                report.push_summary(method, e.slice, level, e.k, &summary, e.subsamples, m, seed);
            }
        }
        Ok(())
    }

    fn eval(&self, dir: &Path) -> Result<Vec<String>> {
        let inputs = self.eval_inputs()?;
        let mut report = EvalReport::default();
        self.metadata(&inputs, &mut report)?;
        let rankings = dir.join("rankings");
        if rankings.exists() {
            fs::remove_dir_all(&rankings)?;
        }
        let mut files = Vec::new();
        for method in &self.config.eval.methods {
            let scores = self.method_scores(method, &inputs)?;
            self.evaluate(&inputs, method, &scores, &mut report)?;
            if self.options.dump_rankings {
                files.push(self.dump_rankings(dir, method, &inputs, &scores)?);
            }
        }
        files.extend(write_report(dir, "eval", &report)?);
        Ok(files)
    }

    fn metadata(&self, inputs: &EvalInputs, report: &mut EvalReport) -> Result<()> {
        let md = &mut report.metadata;
        md.insert("config_hash".into(), self.config.hash());
        md.insert("score_key".into(), self.key(Stage::Score)?);
        md.insert("slice_size".into(), inputs.sets.len().to_string());
        md.insert("accuracy_before".into(), format!("{:.4}", inputs.selection.accuracy_before));
        md.insert("accuracy_after".into(), format!("{:.4}", inputs.selection.accuracy_after));
        md.insert("checkpoints".into(), format!("{:?}", inputs.selection.steps));
        Ok(())
    }

    fn dump_rankings(&self, dir: &Path, method: &str, inputs: &EvalInputs, scores: &[Vec<f64>]) -> Result<String> {
        let name = format!("rankings/{method}.tsv");
        let path = dir.join(&name);
        fs::create_dir_all(path.parent().expect("has parent"))?;
        let mut w = BufWriter::new(fs::File::create(&path)?);
        writeln!(w, "query_id\trank\tsentence_id\tscore\trelevant\tinput\toutput")?;
        let tie_seed = derive_seed(self.config.seed, &format!("eval.{}.ties", self.config.eval.seeds[0]));
        for (s, sc) in inputs.sets.iter().zip(scores) {
            let q = inputs.example(s.query)?;
            let ranked = rank_candidates(&inputs.bundle, q, &s.candidates, sc, Level::Fact, method, tie_seed)?;
            let text: BTreeMap<_, _> = s
                .candidates
                .iter()
                .filter_map(|&c| inputs.bundle.example(c))
                .map(|e| (e.sentence_id, e))
                .collect();
            for (rank, (sentence, score, rel)) in ranked.iter().enumerate() {
                let ex = text[sentence];
                writeln!(
                    w,
                    "{}\t{}\t{}\t{:?}\t{}\t{}\t{}",
                    s.query,
                    rank + 1,
                    sentence.0,
                    score,
                    rel,
                    ex.input,
                    ex.output
                )?;
            }
        }
        w.flush()?;
        Ok(name)
    }

    fn sweep(&self, dir: &Path) -> Result<Vec<String>> {
        let sets = self.sweep_sets();
        if sets.is_empty() {
            bail!("no tag sets given for the sweep");
        }
        let inputs = self.eval_inputs()?;
        // Reject unknown tags before any scoring.
        for tag in sets.iter().flat_map(|s| s.split(',')) {
            if tag.starts_with("A.") {
                ActivationTag::parse(inputs.model_config(), tag)?;
            } else {
                gradient_tag_blocks(inputs.model_config(), tag)?;
            }
        }
        let mut report = EvalReport::default();
        self.metadata(&inputs, &mut report)?;
        for set in &sets {
            let scores = self.tag_set_scores(set, &inputs)?;
            self.evaluate(&inputs, set, &scores, &mut report)?;
        }
        write_report(dir, "sweep", &report)
    }

    /// Sum over the comma-separated tags of each tag's own scores.
    pub fn tag_set_scores(&self, set: &str, inputs: &EvalInputs) -> Result<Vec<Vec<f64>>> {
        let mut total: Option<Vec<Vec<f64>>> = None;
        for tag in set.split(',') {
            let tags = [tag.to_string()];
            let s = if tag.starts_with("A.") {
                self.embed_scores(&tags, inputs)?
            } else {
                self.tracin_scores(&tags, inputs)?
            };
            total = Some(match total {
                None => s,
                Some(t) => t
                    .iter()
                    .zip(&s)
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                    .collect(),
            });
        }
        total.ok_or_else(|| anyhow!("empty tag set"))
    }

    fn report(&self, dir: &Path) -> Result<Vec<String>> {
        let eval = self.load_eval()?;
        let selection = self.load_selection()?;
        let sweep = if self.sweep_sets().is_empty() {
            None
        } else {
            Some(read_json::<EvalReport>(&self.dir(Stage::Sweep).join("sweep.json"))?)
        };
        let slice = self.config.eval.slice;
        let report = RunReport {
            config_hash: self.config.hash(),
            accuracy_before: selection.accuracy_before,
            accuracy_after: selection.accuracy_after,
            slice: slice.to_string(),
            slice_size: selection.slice(slice)?.members.len(),
            eval,
            sweep,
        };
        write_json(&dir.join("report.json"), &report)?;
        fs::write(dir.join("report.txt"), render_report(&report))?;
        Ok(vec!["report.json".into(), "report.txt".into()])
    }
}

pub struct ModelContext {
    pub vocab: Vocab,
    pub model: Transformer,
    pub hash: String,
}

pub struct EvalInputs {
    pub bundle: DatasetBundle,
    pub index: Bm25Index,
    pub model_config: factrace_core::model::ModelConfig,
    pub selection: Selection,
    /// Candidate sets of the scored queries.
    pub sets: Vec<CandidateSet>,
    pub tables: Option<Vec<BlockScoreTable>>,
    pub embed: Option<BTreeMap<(ExampleId, ExampleId), BTreeMap<String, f64>>>,
}

impl EvalInputs {
    pub fn example(&self, id: ExampleId) -> Result<&MaskedExample> {
        self.bundle.example(id).ok_or_else(|| anyhow!("unknown example {id}"))
    }

    pub fn model_config(&self) -> &factrace_core::model::ModelConfig {
        &self.model_config
    }
}

/// Table-4-style summary: one line per method on the fact level, then the
/// full eval table.
pub fn render_report(r: &RunReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("config {}\n", r.config_hash));
    out.push_str(&format!(
        "query accuracy: {:.1}% before fine-tuning, {:.1}% after\n",
        100.0 * r.accuracy_before,
        100.0 * r.accuracy_after
    ));
    out.push_str(&format!("slice {}: {} queries\n\n", r.slice, r.slice_size));
    let mut methods: Vec<&str> = Vec::new();
    for row in &r.eval.rows {
        if !methods.contains(&row.method.as_str()) {
            methods.push(&row.method);
        }
    }
    let seeds: BTreeSet<u64> = r.eval.rows.iter().map(|row| row.seed).collect();
    out.push_str(&format!("{:<16}{:>8}  {:>16}  {:>16}  {:>16}\n", "method", "seed", "MRR", "Recall@k", "Precision@k"));
    for m in &methods {
        for &seed in &seeds {
            let cell = |prefix: &str| {
                r.eval
                    .rows
                    .iter()
                    .find(|row| row.method == *m && row.seed == seed && row.relevance_level == "fact" && row.metric.starts_with(prefix))
                    .map(|row| format!("{:.2} ± {:.2}", 100.0 * row.mean, 100.0 * row.std))
                    .unwrap_or_else(|| "-".into())
            };
            out.push_str(&format!(
                "{:<16}{:>8}  {:>16}  {:>16}  {:>16}\n",
                m,
                seed,
                cell("mrr"),
                cell("recall"),
                cell("precision")
            ));
        }
    }
    out.push_str("\nAll levels:\n");
    out.push_str(&r.eval.to_table());
    if let Some(sweep) = &r.sweep {
        out.push_str("\nLayer sweep:\n");
        out.push_str(&sweep.to_table());
    }
    out
}

fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<Vec<String>> {
    let csv = format!("{stem}.csv");
    let txt = format!("{stem}.txt");
    let json = format!("{stem}.json");
    let mut w = BufWriter::new(fs::File::create(dir.join(&csv))?);
    report.write_csv(&mut w)?;
    w.flush()?;
    fs::write(dir.join(&txt), report.to_table())?;
    write_json(&dir.join(&json), report)?;
    Ok(vec![csv, txt, json])
}

pub fn checkpoint_file(step: u64) -> String {
    format!("step-{step:08}.ckpt")
}

fn table_file(query: ExampleId) -> String {
    format!("tracin-q{:06}.tsv", query.0)
}

fn clear_checkpoints(dir: &Path) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "ckpt") {
            fs::remove_file(path)?;
        }
    }
    Ok(())
}

/// Freshly initialized parameters saved as a step-0 checkpoint, with the
/// mean loss over `examples` as its training loss.
fn initial_checkpoint(ctx: &ModelContext, examples: &[EncodedExample]) -> Result<Checkpoint> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(ctx.model.config().seed);
    let params = ctx.model.init_params(&mut rng);
    let mut loss = 0.0;
    for e in examples {
        loss += ctx.model.loss(&params, e)?;
    }
    Ok(Checkpoint {
        phase: Phase::Pretrain,
        step: 0,
        train_loss: loss / examples.len().max(1) as f64,
        config: ctx.model.config().clone(),
        config_hash: ctx.hash.clone(),
        optimizer: AdafactorState::new(&params),
        params,
    })
}

/// `n` items split into at most `parts` contiguous ranges.
fn split(n: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let parts = parts.clamp(1, n.max(1));
    let size = n.div_ceil(parts);
    (0..parts)
        .map(|i| (i * size).min(n)..((i + 1) * size).min(n))
        .filter(|r| !r.is_empty())
        .collect()
}

/// `f` over `0..n` on up to `workers` threads, results in index order.
fn par_map<T: Send>(workers: usize, n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    if workers <= 1 {
        return (0..n).map(&f).collect();
    }
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = split(n, workers)
            .into_iter()
            .map(|r| scope.spawn(move || r.map(f).collect::<Result<Vec<T>>>()))
            .collect();
        let mut out = Vec::with_capacity(n);
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("config serializes")
}
