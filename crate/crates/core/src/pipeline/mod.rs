//! Stage orchestration over a run directory: generate, prepare, train,
//! evaluate, sweep and report, with hashed outputs and resumable cells.

mod cells;
mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::Serialize;

pub use cells::{parse_scenario, Cell, ModelSpec};
pub use manifest::{sha256_file, write_atomic, Manifest, RunDir, StageRecord, StageStatus, TOOL_VERSION};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{accuracy_at_1, build_report_grid, mean_target_stay, random_guess_baseline, ScenarioResult};
use crate::features::{window_features, EventStore, FeatureDims, FeatureVector};
use crate::forest::forest_fit;
use crate::fusion::{encode_features, fusion_fit, FusedModel, FusionExample, FusionFitConfig, FusionManifest, LeakageAudit, TimeEncoding};
use crate::granularity::{assign_all_granularities, transition_counts};
use crate::io::{self, CentroidRow, EventRow, GeoRow, LabeledRow, LabeledRowIn, PredictionRow, QueryRow, ResultRow, StayStatsRow, TestingSizeCsvRow, TrajectoryRow, TransitionRow};
use crate::markov::markov_fit;
use crate::matrix::DesignMatrix;
use crate::neuralseq::{fit, preprocess_sequence, read_checkpoint, write_checkpoint, LstmClassifier, SeqExample};
use crate::querysim::{grouped_split, label_dataset, simulate_queries, LabeledQuery, Partition, Query, Scenario};
use crate::rng::{child_rng, derive_seed};
use crate::synthgen::{generate_world, inject_gaps_all, GeoRecord, UsageEvent};
use crate::trajectory::{extract_trajectories, stay_segments, Granularity, Trajectory};

pub const CONFIG: &str = "config.toml";
pub const GEO: &str = "geo.csv";
pub const EVENTS: &str = "events.csv";
pub const RECORDS: &str = "records.csv";
pub const CENTROIDS: &str = "centroids.csv";
pub const TRANSITIONS: &str = "transitions.csv";
pub const TRAJECTORIES: &str = "trajectories.csv";
pub const STAY_STATS: &str = "stay_stats.csv";
pub const QUERIES: &str = "queries.csv";
pub const LABELED: &str = "labeled_queries.csv";
pub const TESTING_SIZE: &str = "testing_size.csv";
pub const RESULTS: &str = "results.csv";
pub const HEATMAP: &str = "heatmap.csv";
pub const REPORT: &str = "report.txt";

const PREPARED_INPUTS: [&str; 4] = [RECORDS, TRAJECTORIES, QUERIES, LABELED];

/// Outcome of a batch of cells.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainSummary {
    pub trained: Vec<String>,
    pub skipped: Vec<String>,
}

/// Everything `prepare` produced, loaded back for model training.
pub struct PreparedData {
    pub m_values: Vec<Granularity>,
    pub trajectories: Vec<Trajectory>,
    /// Indexed by query ID.
    pub queries: Vec<Query>,
    pub partitions: Vec<Partition>,
    pub labeled: BTreeMap<Scenario, Vec<LabeledQuery>>,
    pub dims: FeatureDims,
    features: Mutex<Option<Arc<Vec<FeatureVector>>>>,
}

impl PreparedData {
    fn partition(&self, lq: &LabeledQuery) -> Partition {
        self.partitions[lq.query.id]
    }

    /// Train / validation / test labeled queries of one scenario.
    pub fn split(&self, scenario: Scenario) -> [Vec<&LabeledQuery>; 3] {
        let mut out: [Vec<&LabeledQuery>; 3] = Default::default();
        for lq in self.labeled.get(&scenario).map(Vec::as_slice).unwrap_or(&[]) {
            let k = match self.partition(lq) {
                Partition::Train => 0,
                Partition::Validation => 1,
                Partition::Test => 2,
            };
            out[k].push(lq);
        }
        out
    }

    pub fn history_tokens(&self, lq: &LabeledQuery, cfg: &Config) -> Result<Vec<u32>> {
        let traj = &self.trajectories[lq.query.trajectory];
        preprocess_sequence(&lq.query.history_locations(traj, lq.granularity)?, &cfg.sequence)
    }

    fn seq_example(&self, lq: &LabeledQuery, cfg: &Config) -> Result<SeqExample> {
        Ok(SeqExample {
            tokens: self.history_tokens(lq, cfg)?,
            target: lq.target,
        })
    }
}

pub struct Pipeline {
    pub run: RunDir,
    pub cfg: Config,
    pool: rayon::ThreadPool,
}

fn record(inputs: BTreeMap<String, String>, outputs: BTreeMap<String, String>, seeds: BTreeMap<String, u64>) -> StageRecord {
    StageRecord {
        status: StageStatus::Done,
        inputs,
        outputs,
        seeds,
        error: None,
    }
}

fn failed(msg: String) -> StageRecord {
    StageRecord {
        status: StageStatus::Failed,
        inputs: BTreeMap::new(),
        outputs: BTreeMap::new(),
        seeds: BTreeMap::new(),
        error: Some(msg),
    }
}

impl Pipeline {
    /// Binds `cfg` to the run directory. A directory already initialised
    /// with a different config is rejected.
    pub fn create(out: &Path, cfg: Config, jobs: usize) -> Result<Self> {
        cfg.validate()?;
        let run = RunDir::new(out)?;
        let path = run.path(CONFIG);
        if path.exists() {
            let existing = Config::load(&path)?;
            if existing != cfg {
                return Err(Error::config(format!(
                    "{} was created with a different config; use a fresh --out",
                    out.display()
                )));
            }
        } else {
            let text = cfg.to_toml()?;
            write_atomic(&path, |w| Ok(w.write_all(text.as_bytes())?))?;
        }
        let echo = serde_json::to_value(&cfg)?;
        run.update_manifest(|m| {
            m.seed = cfg.seed;
            m.config = echo;
        })?;
        Self::with_pool(run, cfg, jobs)
    }

    /// Opens an existing run directory with the config stored in it.
    pub fn open(out: &Path, jobs: usize) -> Result<Self> {
        let run = RunDir::new(out)?;
        let cfg = Config::load(&run.path(CONFIG))?;
        Self::with_pool(run, cfg, jobs)
    }

    fn with_pool(run: RunDir, cfg: Config, jobs: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        Ok(Self { run, cfg, pool })
    }

    fn seed(&self, label: &str) -> u64 {
        derive_seed(self.cfg.seed, label)
    }

    fn write_csv<T: Serialize>(&self, rel: &str, rows: impl IntoIterator<Item = T>) -> Result<()> {
        write_atomic(&self.run.path(rel), |w| io::write_rows(w, rows))
    }

    fn read_csv<T: serde::de::DeserializeOwned>(&self, rel: &str) -> Result<Vec<T>> {
        io::read_rows(BufReader::new(File::open(self.run.path(rel))?))
    }

    fn hashes(&self, rels: &[String]) -> Result<BTreeMap<String, String>> {
        rels.iter().map(|r| Ok((r.clone(), self.run.hash(r)?))).collect()
    }

    /// Runs a stage body with input verification and manifest bookkeeping.
    fn stage(
        &self,
        name: &str,
        inputs: &[&str],
        seeds: BTreeMap<String, u64>,
        body: impl FnOnce() -> Result<Vec<String>> + Send,
    ) -> Result<()> {
        let inputs: Vec<String> = inputs.iter().map(|s| s.to_string()).collect();
        let result = (|| -> Result<_> {
            let manifest = self.run.read_manifest()?;
            let verified = self.run.verify_inputs(&manifest, &inputs)?;
            let outputs = self.pool.install(body)?;
            Ok((verified, self.hashes(&outputs)?))
        })();
        match result {
            Ok((inputs, outputs)) => self.run.update_manifest(|m| {
                m.stages.insert(name.to_string(), record(inputs, outputs, seeds));
            }),
            Err(e) => {
                let msg = e.to_string();
                self.run.update_manifest(|m| {
                    m.stages.insert(name.to_string(), failed(msg));
                })?;
                Err(e)
            }
        }
    }

    /// Whether a stage already finished with intact outputs.
    fn stage_done(&self, name: &str) -> Result<bool> {
        match self.run.read_manifest()?.stages.get(name) {
            Some(rec) => self.run.outputs_intact(rec),
            None => Ok(false),
        }
    }

    /// Synthetic world with device-off gaps: `geo.csv` and `events.csv`.
    pub fn generate(&self) -> Result<()> {
        let world_seed = self.seed("world");
        let gap_seed = self.seed("gaps");
        let seeds = [("world".to_string(), world_seed), ("gaps".to_string(), gap_seed)].into();
        self.stage("generate", &[], seeds, || {
            let mut wc = self.cfg.world.clone();
            wc.rng_seed = world_seed;
            let world = generate_world(&wc)?;
            let geo = inject_gaps_all(&world.geo, &self.cfg.gaps, gap_seed)?;
            self.write_csv(GEO, geo.iter().map(GeoRow::from))?;
            self.write_csv(EVENTS, world.events.iter().map(EventRow::from))?;
            Ok(vec![GEO.into(), EVENTS.into()])
        })
    }

    /// Clustering, trajectories, queries, labels and partition assignment.
    pub fn prepare(&self) -> Result<()> {
        let kmeans_seed = self.seed("kmeans");
        let query_seed = self.seed("queries");
        let split_seed = self.seed("split");
        let seeds = [
            ("kmeans".to_string(), kmeans_seed),
            ("queries".to_string(), query_seed),
            ("split".to_string(), split_seed),
        ]
        .into();
        let inputs: &[&str] = if self.cfg.sweep.export_features { &[GEO, EVENTS] } else { &[GEO] };
        self.stage("prepare", inputs, seeds, || {
            let cfg = &self.cfg;
            let geo: Vec<GeoRecord> = self.read_csv::<GeoRow>(GEO)?.into_iter().map(GeoRecord::from).collect();
            let (users, fits) = assign_all_granularities(&geo, &cfg.granularity, kmeans_seed)?;
            let m_values = cfg.granularity.m_values.clone();
            write_atomic(&self.run.path(RECORDS), |w| io::write_records(w, &users, &m_values))?;
            self.write_csv(
                CENTROIDS,
                fits.iter().flat_map(|(m, f)| {
                    f.centroids.iter().enumerate().map(move |(i, c)| CentroidRow {
                        m: *m,
                        cluster_id: i as u32,
                        x: c.x,
                        y: c.y,
                    })
                }),
            )?;

            let mut trajectories = Vec::new();
            for u in &users {
                trajectories.extend(extract_trajectories(u.user_id, &u.records, &cfg.extraction)?);
            }
            self.write_csv(
                TRAJECTORIES,
                trajectories.iter().enumerate().map(|(i, t)| TrajectoryRow {
                    trajectory_id: i,
                    user_id: t.user_id,
                    start: t.records[0].timestamp,
                    end: t.records.last().unwrap().timestamp,
                    n_records: t.len(),
                }),
            )?;

            let mut transitions = Vec::new();
            let mut stays = Vec::new();
            for &m in &m_values {
                let tm = transition_counts(&trajectories, m, true, cfg.granularity.transition_min_count)?;
                transitions.extend(tm.exported().into_iter().map(|(from, to, count)| TransitionRow { m, from, to, count }));
                let (mut total, mut n) = (0i64, 0usize);
                for t in &trajectories {
                    for s in stay_segments(t, m)? {
                        total += s.stay_seconds;
                        n += 1;
                    }
                }
                stays.push(StayStatsRow {
                    m,
                    mean_stay_s: if n == 0 { 0.0 } else { total as f64 / n as f64 },
                    n_segments: n,
                });
            }
            self.write_csv(TRANSITIONS, transitions)?;
            self.write_csv(STAY_STATS, stays)?;

            let mut rng = child_rng(self.cfg.seed, "queries");
            debug_assert_eq!(derive_seed(self.cfg.seed, "queries"), query_seed);
            let mut queries: Vec<Query> = Vec::new();
            for (i, t) in trajectories.iter().enumerate() {
                let qs = simulate_queries(i, t, cfg.queries.n_per_trajectory, cfg.queries.min_frac, queries.len(), &mut rng);
                queries.extend(qs);
            }
            let split = grouped_split(&queries, cfg.queries.split_fractions, &mut child_rng(self.cfg.seed, "split"))?;
            self.write_csv(
                QUERIES,
                queries.iter().map(|q| QueryRow {
                    query_id: q.id,
                    trajectory_id: q.trajectory,
                    split_index: q.split_index,
                    partition: split.partition_of(q).expect("every query is partitioned"),
                }),
            )?;

            let criteria = cfg.queries.criteria();
            let labeled = label_dataset(&trajectories, &queries, &criteria, &m_values)?;
            self.write_csv(
                LABELED,
                labeled.cells.values().flatten().map(|lq| LabeledRow {
                    query_id: lq.query.id,
                    trajectory_id: lq.query.trajectory,
                    split_index: lq.query.split_index,
                    m: lq.granularity,
                    criterion: lq.criterion.name(),
                    k: lq.criterion.k(),
                    target: lq.target,
                    current: lq.current,
                    target_stay_s: lq.target_stay_seconds,
                }),
            )?;
            let sizes = labeled.testing_size_table(|q| split.partition_of(q) == Some(Partition::Test));
            self.write_csv(
                TESTING_SIZE,
                sizes.iter().map(|r| TestingSizeCsvRow {
                    criterion: r.criterion.name().to_string(),
                    k: r.criterion.k(),
                    m: r.m,
                    count: r.count,
                    test_count: r.test_count,
                }),
            )?;
            let mut outputs: Vec<String> = [RECORDS, CENTROIDS, TRAJECTORIES, TRANSITIONS, STAY_STATS, QUERIES, LABELED, TESTING_SIZE]
                .iter()
                .map(|s| s.to_string())
                .collect();
            if cfg.sweep.export_features {
                outputs.extend(self.export_features(&trajectories, &queries)?);
            }
            Ok(outputs)
        })
    }

    fn export_features(&self, trajectories: &[Trajectory], queries: &[Query]) -> Result<Vec<String>> {
        let store = self.load_events()?;
        let dims = FeatureDims::from(&self.cfg.world);
        let feats = query_features(&store, trajectories, queries, &dims)?;
        let mut outputs = Vec::new();
        for g in crate::features::FeatureGroup::ALL {
            let groups = crate::fusion::GroupSet::new([g]);
            let rows: Vec<(usize, Vec<f64>)> = feats
                .iter()
                .enumerate()
                .map(|(id, fv)| {
                    let mut v = Vec::new();
                    encode_features(fv, &groups, &dims, TimeEncoding::Ordinal, &mut v)?;
                    Ok((id, v))
                })
                .collect::<Result<_>>()?;
            let rel = format!("features_{}.csv", g.name());
            write_atomic(&self.run.path(&rel), |w| io::write_feature_matrix(w, &format!("{}_", g.name()), &rows))?;
            outputs.push(rel);
        }
        Ok(outputs)
    }

    fn load_events(&self) -> Result<EventStore> {
        let events: Vec<UsageEvent> = self
            .read_csv::<EventRow>(EVENTS)?
            .into_iter()
            .map(UsageEvent::try_from)
            .collect::<Result<_>>()?;
        Ok(EventStore::new(&events))
    }

    /// Loads the outputs of `prepare` after checking their hashes.
    pub fn load_prepared(&self) -> Result<PreparedData> {
        let manifest = self.run.read_manifest()?;
        let inputs: Vec<String> = PREPARED_INPUTS.iter().map(|s| s.to_string()).collect();
        self.run.verify_inputs(&manifest, &inputs)?;
        let (m_values, users) = io::read_records(BufReader::new(File::open(self.run.path(RECORDS))?))?;
        let by_user: BTreeMap<u32, &[crate::trajectory::LocationRecord]> =
            users.iter().map(|u| (u.user_id, u.records.as_slice())).collect();
        let trajectories: Vec<Trajectory> = self
            .read_csv::<TrajectoryRow>(TRAJECTORIES)?
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let recs = by_user
                    .get(&row.user_id)
                    .ok_or_else(|| Error::parse(TRAJECTORIES, format!("unknown user {}", row.user_id)))?;
                let lo = recs.partition_point(|r| r.timestamp < row.start);
                let slice = recs
                    .get(lo..lo + row.n_records)
                    .filter(|s| row.trajectory_id == i && s.last().is_some_and(|r| r.timestamp == row.end))
                    .ok_or_else(|| Error::parse(TRAJECTORIES, format!("row {i} does not match {RECORDS}")))?;
                Ok(Trajectory {
                    user_id: row.user_id,
                    records: slice.to_vec(),
                })
            })
            .collect::<Result<_>>()?;
        let qrows: Vec<QueryRow> = self.read_csv(QUERIES)?;
        let mut queries = Vec::with_capacity(qrows.len());
        let mut partitions = Vec::with_capacity(qrows.len());
        for (i, q) in qrows.iter().enumerate() {
            if q.query_id != i || q.trajectory_id >= trajectories.len() {
                return Err(Error::parse(QUERIES, format!("row {i} is inconsistent")));
            }
            queries.push(Query {
                id: q.query_id,
                trajectory: q.trajectory_id,
                split_index: q.split_index,
            });
            partitions.push(q.partition);
        }
        let mut labeled: BTreeMap<Scenario, Vec<LabeledQuery>> = BTreeMap::new();
        for row in self.read_csv::<LabeledRowIn>(LABELED)? {
            let criterion = row.criterion()?;
            let query = *queries
                .get(row.query_id)
                .ok_or_else(|| Error::parse(LABELED, format!("unknown query {}", row.query_id)))?;
            labeled.entry(Scenario { m: row.m, criterion }).or_default().push(LabeledQuery {
                query,
                criterion,
                granularity: row.m,
                current: row.current,
                target: row.target,
                target_stay_seconds: row.target_stay_s,
            });
        }
        Ok(PreparedData {
            m_values,
            trajectories,
            queries,
            partitions,
            labeled,
            dims: FeatureDims::from(&self.cfg.world),
            features: Mutex::new(None),
        })
    }

    fn features(&self, data: &PreparedData) -> Result<Arc<Vec<FeatureVector>>> {
        let mut slot = data.features.lock().unwrap();
        if let Some(f) = slot.as_ref() {
            return Ok(f.clone());
        }
        let store = self.load_events()?;
        let f = Arc::new(query_features(&store, &data.trajectories, &data.queries, &data.dims)?);
        *slot = Some(f.clone());
        Ok(f)
    }

    /// Every scenario of the configured grid.
    pub fn scenarios(&self) -> Vec<Scenario> {
        let mut out = Vec::new();
        for &m in &self.cfg.granularity.m_values {
            for criterion in self.cfg.queries.criteria() {
                out.push(Scenario { m, criterion });
            }
        }
        out
    }

    pub fn configured_models(&self) -> Result<Vec<ModelSpec>> {
        self.cfg.sweep.models.iter().map(|s| s.parse()).collect()
    }

    /// Trains the requested cells, skipping those whose outputs are intact
    /// and whose inputs are unchanged. Fusion cells pull in the LSTM cell of
    /// their scenario first.
    pub fn train(&self, models: &[ModelSpec], scenarios: &[Scenario]) -> Result<TrainSummary> {
        let data = self.load_prepared()?;
        let mut first: BTreeSet<Cell> = BTreeSet::new();
        let mut second: BTreeSet<Cell> = BTreeSet::new();
        for &scenario in scenarios {
            for model in models {
                let cell = Cell {
                    scenario,
                    model: model.clone(),
                };
                if model.needs_lstm() {
                    first.insert(Cell {
                        scenario,
                        model: ModelSpec::Lstm,
                    });
                    second.insert(cell);
                } else {
                    first.insert(cell);
                }
            }
        }
        if first.iter().chain(&second).any(|c| c.model.uses_features()) {
            self.features(&data)?;
        }
        let mut summary = TrainSummary::default();
        for batch in [first, second] {
            let batch: Vec<Cell> = batch.into_iter().collect();
            let outcomes: Vec<Result<bool>> = self.pool.install(|| batch.par_iter().map(|c| self.run_cell(&data, c)).collect());
            for (cell, outcome) in batch.iter().zip(outcomes) {
                if outcome? {
                    summary.trained.push(cell.id());
                } else {
                    summary.skipped.push(cell.id());
                }
            }
        }
        Ok(summary)
    }

    fn cell_inputs(&self, cell: &Cell) -> Vec<String> {
        let mut inputs: Vec<String> = PREPARED_INPUTS.iter().map(|s| s.to_string()).collect();
        if cell.model.uses_features() {
            inputs.push(EVENTS.into());
        }
        if cell.model.needs_lstm() {
            let lstm = Cell {
                scenario: cell.scenario,
                model: ModelSpec::Lstm,
            };
            inputs.push(lstm.file("model.ckpt"));
        }
        inputs
    }

    /// Returns `Ok(false)` when the cell was already complete.
    fn run_cell(&self, data: &PreparedData, cell: &Cell) -> Result<bool> {
        let id = cell.id();
        let manifest = self.run.read_manifest()?;
        let inputs = self.cell_inputs(cell);
        let verified = self.run.verify_inputs(&manifest, &inputs)?;
        if let Some(rec) = manifest.cells.get(&id) {
            if rec.inputs == verified && self.run.outputs_intact(rec)? {
                return Ok(false);
            }
        }
        let seed = self.seed(&format!("cell/{id}"));
        match self.train_cell(data, cell, seed) {
            Ok(outputs) => {
                let outputs = self.hashes(&outputs)?;
                self.run.update_manifest(|m| {
                    m.cells.insert(id, record(verified, outputs, [("cell".to_string(), seed)].into()));
                })?;
                Ok(true)
            }
            Err(e) => {
                let msg = e.to_string();
                self.run.update_manifest(|m| {
                    m.cells.insert(id, failed(msg));
                })?;
                Err(e)
            }
        }
    }

    fn train_cell(&self, data: &PreparedData, cell: &Cell, seed: u64) -> Result<Vec<String>> {
        let cfg = &self.cfg;
        let m = cell.scenario.m;
        let [train, val, test] = data.split(cell.scenario);
        let dir = self.run.path(&cell.dir());
        std::fs::create_dir_all(&dir)?;
        let mut outputs: Vec<String> = Vec::new();

        let ids = |qs: &[&LabeledQuery]| -> Vec<u64> { qs.iter().map(|q| q.query.id as u64).collect() };
        let train_ids: Vec<u64> = ids(&train).into_iter().chain(ids(&val)).collect();
        let audit = LeakageAudit::check(&train_ids, &ids(&test))?;
        let audit_rel = cell.file("audit.json");
        write_atomic(&self.run.path(&audit_rel), |w| Ok(serde_json::to_writer_pretty(&mut *w, &audit)?))?;
        outputs.push(audit_rel);

        let predictions: Vec<u32> = if train.is_empty() || test.is_empty() {
            // nothing to learn from or nothing to score
            Vec::new()
        } else {
            match &cell.model {
                ModelSpec::Markov => {
                    let histories: Vec<Vec<u32>> = train
                        .iter()
                        .map(|lq| lq.query.history_locations(&data.trajectories[lq.query.trajectory], m))
                        .collect::<Result<_>>()?;
                    let model = markov_fit(histories.iter().map(Vec::as_slice), m)?;
                    let trans_rel = cell.file("transitions.csv");
                    let rows: Vec<TransitionRow> = (0..m)
                        .flat_map(|from| (0..m).map(move |to| (from, to)))
                        .filter(|&(f, t)| model.count(f, t) > 0)
                        .map(|(from, to)| TransitionRow {
                            m,
                            from,
                            to,
                            count: model.count(from, to),
                        })
                        .collect();
                    self.write_csv(&trans_rel, rows)?;
                    let dist_rel = cell.file("global_dist.csv");
                    #[derive(Serialize)]
                    struct DistRow {
                        m: Granularity,
                        location: u32,
                        count: u64,
                    }
                    self.write_csv(
                        &dist_rel,
                        model.global_dist.iter().enumerate().map(|(l, &count)| DistRow {
                            m,
                            location: l as u32,
                            count,
                        }),
                    )?;
                    outputs.extend([trans_rel, dist_rel]);
                    test.iter().map(|lq| model.predict(lq.current)).collect::<Result<_>>()?
                }
                ModelSpec::Lstm => {
                    let tr: Vec<SeqExample> = train.iter().map(|lq| data.seq_example(lq, cfg)).collect::<Result<_>>()?;
                    let va: Vec<SeqExample> = val.iter().map(|lq| data.seq_example(lq, cfg)).collect::<Result<_>>()?;
                    let init = LstmClassifier::new(m as usize, &cfg.lstm, derive_seed(seed, "init"))?;
                    let mut tc = cfg.train;
                    tc.rng_seed = derive_seed(seed, "shuffle");
                    let (model, history) = fit(init, &tr, &va, &tc)?;
                    let ckpt_rel = cell.file("model.ckpt");
                    write_atomic(&self.run.path(&ckpt_rel), |w| write_checkpoint(w, &model.to_checkpoint(seed)))?;
                    let hist_rel = cell.file("train_history.json");
                    write_atomic(&self.run.path(&hist_rel), |w| Ok(serde_json::to_writer_pretty(&mut *w, &history)?))?;
                    outputs.extend([ckpt_rel, hist_rel]);
                    test.iter()
                        .map(|lq| Ok(model.predict(&data.history_tokens(lq, cfg)?)?.0))
                        .collect::<Result<_>>()?
                }
                ModelSpec::Forest(groups) => {
                    let feats = self.features(data)?;
                    let encode = |lq: &LabeledQuery| -> Result<Vec<f64>> {
                        let mut v = Vec::new();
                        encode_features(&feats[lq.query.id], groups, &data.dims, TimeEncoding::Ordinal, &mut v)?;
                        Ok(v)
                    };
                    let rows: Vec<Vec<f64>> = train.iter().map(|lq| encode(lq)).collect::<Result<_>>()?;
                    let x = DesignMatrix::from_rows(&rows)?;
                    let y: Vec<u32> = train.iter().map(|lq| lq.target).collect();
                    let mut fc = cfg.forest;
                    fc.rng_seed = derive_seed(seed, "forest");
                    let forest = forest_fit(&x, &y, m as usize, &fc)?;
                    let rel = cell.file("forest.json");
                    write_atomic(&self.run.path(&rel), |w| Ok(serde_json::to_writer(&mut *w, &forest)?))?;
                    outputs.push(rel);
                    test.iter()
                        .map(|lq| Ok(forest.predict(&encode(lq)?)?.0))
                        .collect::<Result<_>>()?
                }
                ModelSpec::Fusion(variant, groups) => {
                    let lstm_cell = Cell {
                        scenario: cell.scenario,
                        model: ModelSpec::Lstm,
                    };
                    let ckpt = read_checkpoint(BufReader::new(File::open(self.run.path(&lstm_cell.file("model.ckpt")))?))?;
                    let lstm = LstmClassifier::from_checkpoint(&ckpt)?;
                    let feats = self.features(data)?;
                    let example = |lq: &LabeledQuery| -> Result<FusionExample> {
                        Ok(FusionExample {
                            query_id: lq.query.id as u64,
                            tokens: data.history_tokens(lq, cfg)?,
                            features: feats[lq.query.id].clone(),
                            target: lq.target,
                        })
                    };
                    let tr: Vec<FusionExample> = train.iter().map(|lq| example(lq)).collect::<Result<_>>()?;
                    let va: Vec<FusionExample> = val.iter().map(|lq| example(lq)).collect::<Result<_>>()?;
                    let fit_cfg = FusionFitConfig {
                        fusion: cfg.fusion.clone(),
                        train: cfg.train,
                        forest: cfg.forest,
                        dims: data.dims,
                        seed,
                    };
                    let (model, _) = fusion_fit(*variant, &lstm, groups, &tr, &va, &fit_cfg)?;
                    let info = FusionManifest {
                        variant: *variant,
                        groups: groups.clone(),
                        dims: data.dims,
                        joint_encoder: cfg.fusion.joint_encoder,
                        seed,
                        audit: audit.clone(),
                    };
                    model.save(&dir, &info)?;
                    let files: &[&str] = match model {
                        FusedModel::Forest { .. } => &["encoder.ckpt", "forest.json", "fusion.json"],
                        _ => &["encoder.ckpt", "head.ckpt", "fusion.json"],
                    };
                    outputs.extend(files.iter().map(|f| cell.file(f)));
                    test.iter()
                        .map(|lq| model.predict(&example(lq)?))
                        .collect::<Result<_>>()?
                }
            }
        };
        let pred_rel = cell.file("predictions.csv");
        self.write_csv(
            &pred_rel,
            test.iter().zip(&predictions).map(|(lq, &p)| PredictionRow {
                query_id: lq.query.id,
                target: lq.target,
                prediction: p,
            }),
        )?;
        outputs.push(pred_rel);
        Ok(outputs)
    }

    /// Scores every finished cell: `results.csv` and `heatmap.csv`.
    pub fn evaluate(&self) -> Result<Vec<ScenarioResult>> {
        let manifest = self.run.read_manifest()?;
        let mut cells: Vec<(Cell, String)> = Vec::new();
        for (id, rec) in &manifest.cells {
            if rec.status != StageStatus::Done {
                continue;
            }
            let (scenario, model) = id
                .split_once("__")
                .ok_or_else(|| Error::parse("cell id", id.clone()))?;
            let cell = Cell {
                scenario: parse_scenario(scenario)?,
                model: model.replacen('-', ":", 1).parse()?,
            };
            cells.push((cell.clone(), cell.file("predictions.csv")));
        }
        if cells.is_empty() {
            return Err(Error::EmptyInput("trained cells (run train or sweep first)"));
        }
        let mut inputs: Vec<String> = vec![LABELED.into(), QUERIES.into()];
        inputs.extend(cells.iter().map(|(_, p)| p.clone()));
        let mut out = Vec::new();
        self.stage("evaluate", &inputs.iter().map(String::as_str).collect::<Vec<_>>(), BTreeMap::new(), || {
            let data_stays = self.test_target_stays()?;
            let mut raw: Vec<ScenarioResult> = Vec::new();
            for (cell, pred_rel) in &cells {
                let preds: Vec<PredictionRow> = self.read_csv(pred_rel)?;
                if preds.is_empty() {
                    continue;
                }
                let p: Vec<u32> = preds.iter().map(|r| r.prediction).collect();
                let t: Vec<u32> = preds.iter().map(|r| r.target).collect();
                raw.push(ScenarioResult {
                    m: cell.scenario.m,
                    criterion: cell.scenario.criterion,
                    model: cell.model.name().to_string(),
                    groups: cell.model.groups(),
                    n_test: preds.len(),
                    accuracy: accuracy_at_1(&p, &t)?,
                    relative_perf: None,
                    mean_target_stay_seconds: data_stays.get(&cell.scenario).copied().unwrap_or(0.0),
                });
            }
            let lstm_acc: BTreeMap<Scenario, (f64, usize)> = raw
                .iter()
                .filter(|r| r.model == "lstm")
                .map(|r| (Scenario { m: r.m, criterion: r.criterion }, (r.accuracy, r.n_test)))
                .collect();
            for r in raw.iter_mut() {
                if r.model.starts_with("fusion") || r.model == "forest" {
                    r.relative_perf = lstm_acc
                        .get(&Scenario { m: r.m, criterion: r.criterion })
                        .and_then(|&(acc, _)| crate::fusion::relative_performance(r.accuracy, acc));
                }
            }
            let mut seen = BTreeSet::new();
            let mut baselines = Vec::new();
            for r in &raw {
                let sc = Scenario { m: r.m, criterion: r.criterion };
                if seen.insert(sc) {
                    baselines.push(ScenarioResult {
                        m: r.m,
                        criterion: r.criterion,
                        model: "random".into(),
                        groups: String::new(),
                        n_test: r.n_test,
                        accuracy: random_guess_baseline(r.m)?,
                        relative_perf: None,
                        mean_target_stay_seconds: r.mean_target_stay_seconds,
                    });
                }
            }
            raw.extend(baselines);
            raw.sort_by(|a, b| (a.m, a.criterion, a.label()).cmp(&(b.m, b.criterion, b.label())));
            self.write_csv(RESULTS, raw.iter().map(ResultRow::from))?;
            let grid = build_report_grid(&raw, &self.cfg.eval.exclude_m);
            self.write_csv(HEATMAP, grid.heatmap())?;
            out = raw;
            Ok(vec![RESULTS.into(), HEATMAP.into()])
        })?;
        Ok(out)
    }

    /// Mean target stay over each scenario's test queries.
    fn test_target_stays(&self) -> Result<BTreeMap<Scenario, f64>> {
        let parts: Vec<QueryRow> = self.read_csv(QUERIES)?;
        let mut by_scenario: BTreeMap<Scenario, Vec<LabeledQuery>> = BTreeMap::new();
        for row in self.read_csv::<LabeledRowIn>(LABELED)? {
            if parts.get(row.query_id).map(|q| q.partition) != Some(Partition::Test) {
                continue;
            }
            let criterion = row.criterion()?;
            by_scenario.entry(Scenario { m: row.m, criterion }).or_default().push(LabeledQuery {
                query: Query {
                    id: row.query_id,
                    trajectory: row.trajectory_id,
                    split_index: row.split_index,
                },
                criterion,
                granularity: row.m,
                current: row.current,
                target: row.target,
                target_stay_seconds: row.target_stay_s,
            });
        }
        Ok(by_scenario.into_iter().map(|(k, v)| (k, mean_target_stay(&v))).collect())
    }

    /// Everything, resuming whatever is already complete.
    pub fn sweep(&self) -> Result<TrainSummary> {
        if !self.stage_done("generate")? {
            self.generate()?;
        }
        if !self.stage_done("prepare")? {
            self.prepare()?;
        }
        let models = self.configured_models()?;
        let summary = self.train(&models, &self.scenarios())?;
        self.evaluate()?;
        Ok(summary)
    }

    /// Plain-text summary of stays, testing sizes, accuracies and the heatmap.
    pub fn report(&self) -> Result<String> {
        let mut text = String::new();
        self.stage("report", &[STAY_STATS, TESTING_SIZE, RESULTS, HEATMAP], BTreeMap::new(), || {
            text = self.render_report()?;
            write_atomic(&self.run.path(REPORT), |w| Ok(w.write_all(text.as_bytes())?))?;
            Ok(vec![REPORT.into()])
        })?;
        Ok(text)
    }

    fn render_report(&self) -> Result<String> {
        use std::fmt::Write as _;
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "Average stay per segment");
        for r in self.read_csv::<StayStatsRow>(STAY_STATS)? {
            let _ = writeln!(w, "  M={:<4} {:>8.1} min  ({} segments)", r.m, r.mean_stay_s / 60.0, r.n_segments);
        }
        let _ = writeln!(w, "\nLabeled queries (all / test)");
        for r in self.read_csv::<TestingSizeCsvRow>(TESTING_SIZE)? {
            let crit = match r.k {
                Some(k) => format!("{}@{k}", r.criterion),
                None => r.criterion.clone(),
            };
            let _ = writeln!(w, "  M={:<4} {:<14} {:>7} / {}", r.m, crit, r.count, r.test_count);
        }
        let _ = writeln!(w, "\nAccuracy@1");
        for r in self.read_csv::<ResultRow>(RESULTS)? {
            let crit = match r.k {
                Some(k) => format!("{}@{k}", r.criterion),
                None => r.criterion.clone(),
            };
            let label = if r.groups.is_empty() { r.model.clone() } else { format!("{}:{}", r.model, r.groups) };
            let rel = r.relative_perf.map(|v| format!("  rel {v:.3}")).unwrap_or_default();
            let _ = writeln!(w, "  M={:<4} {:<14} {:<40} {:.4}  (n={}){rel}", r.m, crit, label, r.accuracy, r.n_test);
        }
        let _ = writeln!(w, "\nMean relative performance");
        for r in self.read_csv::<crate::eval::HeatmapRow>(HEATMAP)? {
            let _ = writeln!(w, "  {:<12} {:<48} {:.4}", r.axis.name(), r.key, r.mean_relative_perf);
        }
        Ok(s)
    }
}

/// Feature vector of every query's history window, indexed by query ID.
pub fn query_features(
    store: &EventStore,
    trajectories: &[Trajectory],
    queries: &[Query],
    dims: &FeatureDims,
) -> Result<Vec<FeatureVector>> {
    queries
        .par_iter()
        .map(|q| {
            let traj = &trajectories[q.trajectory];
            let hist = q.history(traj);
            window_features(store, traj.user_id, hist[0].timestamp, hist[hist.len() - 1].timestamp, dims)
        })
        .collect()
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline").field("run", &self.run).finish_non_exhaustive()
    }
}
