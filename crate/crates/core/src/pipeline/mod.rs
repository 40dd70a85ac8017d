//! Config-driven orchestration: data, split, sparsify, generator, gap
//! filling, optional deblur, segmenters, evaluation and reports.

pub mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::deblur::{build_deblur_pairs, deblur_imp, load_deblur, train_deblur, DeblurConfig};
use crate::error::{Error, Result};
use crate::gan::{fill_gaps, load_generator, train_generator, GanConfig};
use crate::metrics::fid::{EmbedderMode, FeatureEmbedder};
use crate::phantom::{
    generate_phantom_stack, load_stack, persist_stack, split_dataset, DatasetSplit, ImageMaskPair, PhantomConfig,
    SliceStack, SplitAssignment, SplitSpec, WithinA,
};
use crate::plan::{
    assemble_interpolated_dataset, dense_triplets, make_training_triplets, sparsify, AnnotationSetting, GapSlot,
    SparseDataset, TrainingTriplet,
};
use crate::seg::{fill_gaps_bilinear, gan_reconstruction_baseline, train_segmenter, AugmentConfig, SegConfig};
use crate::util::{config_hash, read_json, write_json};

pub use report::{evaluate_and_report, EvaluationReport, ModelRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub phantom: PhantomConfig,
    pub num_patients: usize,
    /// Read stacks from here instead of generating phantoms.
    pub dataset_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            phantom: PhantomConfig::default(),
            num_patients: 8,
            dataset_path: None,
        }
    }
}

/// The last `subset_b` patients (by id) form subset B; subset A is divided
/// by `train`/`val`/`test` fractions unless `spec` is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub subset_b: usize,
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    pub spec: Option<SplitSpec>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            subset_b: 1,
            train: 0.6,
            val: 0.15,
            test: 0.25,
            seed: 0,
            spec: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub interslice_aug: bool,
    pub deblur: bool,
    pub classical_aug: bool,
    pub bilinear_baseline: bool,
    pub gan_reco_baseline: bool,
    pub fully_supervised: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            interslice_aug: true,
            deblur: false,
            classical_aug: false,
            bilinear_baseline: false,
            gan_reco_baseline: false,
            fully_supervised: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub alpha: f64,
    pub embedder: EmbedderMode,
    /// Classifier head JSON used with a pretrained embedder for IS.
    pub is_head: Option<PathBuf>,
    pub is_classes: usize,
    pub is_seed: u64,
    pub is_splits: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alpha: 0.05,
            embedder: EmbedderMode::default(),
            is_head: None,
            is_classes: 10,
            is_seed: 0,
            is_splits: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// Training seed; overrides the generator, deblur and segmenter seeds.
    pub seed: u64,
    pub data: DataConfig,
    pub split: SplitConfig,
    /// Annotation setting numbers, 1..=4.
    pub settings: Vec<usize>,
    pub stages: StageToggles,
    pub gan: GanConfig,
    pub deblur: DeblurConfig,
    pub seg: SegConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            data: DataConfig::default(),
            split: SplitConfig::default(),
            settings: vec![3],
            stages: StageToggles::default(),
            gan: GanConfig {
                encoder_widths: vec![16, 32, 64, 128],
                disc_widths: vec![16, 32, 64],
                lr: 1e-3,
                fid_stop_threshold: f64::INFINITY,
                max_epochs: 50,
                batch_size: 1,
                ..GanConfig::default()
            },
            deblur: DeblurConfig {
                widths: vec![16, 32, 64],
                disc_widths: vec![16, 32, 64],
                ..DeblurConfig::default()
            },
            seg: SegConfig::default(),
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

impl ExperimentConfig {
    /// Keys missing from `text` keep the values of `ExperimentConfig::default()`,
    /// including inside a partially given table.
    pub fn from_toml(text: &str) -> Result<Self> {
        let err = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let mut merged = toml::Table::try_from(ExperimentConfig::default()).map_err(|e| err(&e))?;
        let given: toml::Table = toml::from_str(text).map_err(|e| err(&e))?;
        merge_tables(&mut merged, given);
        merged.try_into().map_err(|e| err(&e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::format(path, m),
            other => other,
        })
    }

    /// The config with the experiment seed pushed into every trainer.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.gan.seed = self.seed;
        c.deblur.seed = self.seed;
        c.seg.seed = self.seed;
        c
    }

    /// Models trained for every setting, the baseline first.
    pub fn setting_models(&self) -> Vec<&'static str> {
        let s = &self.stages;
        let mut models = vec!["partial"];
        for (on, name) in [
            (s.classical_aug, "partial_aug"),
            (s.interslice_aug, "interslice"),
            (s.bilinear_baseline, "bilinear"),
            (s.gan_reco_baseline, "gan_reco"),
        ] {
            if on {
                models.push(name);
            }
        }
        models
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let mut seen = BTreeSet::new();
        for &s in &self.settings {
            AnnotationSetting::from_number(s)?;
            if !seen.insert(s) {
                return bad(format!("setting {s} listed twice"));
            }
        }
        if self.settings.is_empty() && !self.stages.fully_supervised {
            return bad("nothing to train: no settings and fully_supervised is off".into());
        }
        let needs_settings = self.stages.interslice_aug
            || self.stages.classical_aug
            || self.stages.bilinear_baseline
            || self.stages.gan_reco_baseline;
        if needs_settings && self.settings.is_empty() {
            return bad("augmentation stages need at least one setting".into());
        }
        if self.stages.deblur && !self.stages.interslice_aug {
            return bad("deblur post-processes the interpolated dataset; enable interslice_aug".into());
        }
        if self.data.dataset_path.is_none() {
            self.data.phantom.validate()?;
            if self.data.num_patients < 3 {
                return bad("need at least 3 patients for train, val and test".into());
            }
        }
        if !(self.eval.alpha > 0.0 && self.eval.alpha < 1.0) || self.eval.is_splits == 0 || self.eval.is_classes < 2 {
            return bad("eval alpha, IS splits or IS classes out of range".into());
        }
        self.gan.validate()?;
        self.deblur.validate()?;
        self.seg.validate()?;
        self.augment.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    Phantom,
    Split,
    Sparsify,
    TrainGen,
    Fill,
    TrainDeblur,
    TrainSeg,
    Eval,
    Report,
}

impl StageKind {
    pub const ALL: [StageKind; 9] = [
        StageKind::Phantom,
        StageKind::Split,
        StageKind::Sparsify,
        StageKind::TrainGen,
        StageKind::Fill,
        StageKind::TrainDeblur,
        StageKind::TrainSeg,
        StageKind::Eval,
        StageKind::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageKind::Phantom => "phantom",
            StageKind::Split => "split",
            StageKind::Sparsify => "sparsify",
            StageKind::TrainGen => "train-gen",
            StageKind::Fill => "fill",
            StageKind::TrainDeblur => "train-deblur",
            StageKind::TrainSeg => "train-seg",
            StageKind::Eval => "eval",
            StageKind::Report => "report",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown stage `{name}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Cached,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub kind: StageKind,
    pub hash: String,
    pub status: StageStatus,
    /// Paths relative to the output directory.
    pub artifacts: Vec<PathBuf>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
    pub complete: bool,
    pub failed_stage: Option<String>,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn all_cached(&self) -> bool {
        self.stages.iter().all(|s| s.status == StageStatus::Cached)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Continue a run whose manifest records a failed stage.
    pub resume: bool,
    /// Stop after the last stage of this kind.
    pub until: Option<StageKind>,
}

#[derive(Serialize, Deserialize)]
struct StageStamp {
    hash: String,
}

struct Runner {
    out: PathBuf,
    manifest: RunManifest,
}

impl Runner {
    fn open(out: &Path, config_hash: String, options: &RunOptions) -> Result<Self> {
        let path = out.join("manifest.json");
        if path.exists() && !options.resume {
            let previous: RunManifest = read_json(&path)?;
            if let Some(stage) = previous.failed_stage {
                return Err(Error::Config(format!(
                    "{} holds a run that failed in stage `{stage}`; pass --resume to continue it",
                    out.display()
                )));
            }
        }
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Runner {
            out: out.to_path_buf(),
            manifest: RunManifest {
                config_hash,
                ..RunManifest::default()
            },
        })
    }

    /// Run `produce` into `stages/<name>` unless a stamp with the same key
    /// hash is already there. Returns the stage directory and hash.
    fn stage<K: Serialize>(
        &mut self,
        kind: StageKind,
        name: &str,
        key: &K,
        produce: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<(PathBuf, String)> {
        let hash = config_hash(&(name, key));
        let rel = PathBuf::from("stages").join(name);
        let dir = self.out.join(&rel);
        let stamp = dir.join("stage.json");
        let start = Instant::now();
        let cached = stamp.exists() && read_json::<StageStamp>(&stamp).map(|s| s.hash == hash).unwrap_or(false);
        let status = if cached {
            log::info!("stage {name}: cached");
            StageStatus::Cached
        } else {
            log::info!("stage {name}: running");
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            if let Err(e) = produce(&dir) {
                self.manifest.stages.push(StageRecord {
                    name: name.to_string(),
                    kind,
                    hash,
                    status: StageStatus::Failed,
                    artifacts: Vec::new(),
                    seconds: start.elapsed().as_secs_f64(),
                });
                self.manifest.failed_stage = Some(name.to_string());
                self.save()?;
                return Err(Error::Stage {
                    stage: name.to_string(),
                    source: Box::new(e),
                });
            }
            write_json(&stamp, &StageStamp { hash: hash.clone() })?;
            StageStatus::Completed
        };
        self.manifest.stages.push(StageRecord {
            name: name.to_string(),
            kind,
            hash: hash.clone(),
            status,
            artifacts: list_files(&self.out, &dir)?,
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok((dir, hash))
    }

    fn save(&self) -> Result<()> {
        write_json(&self.out.join("manifest.json"), &self.manifest)
    }
}

fn list_files(root: &Path, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut todo = vec![dir.to_path_buf()];
    while let Some(d) = todo.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                todo.push(path);
            } else if path.file_name().is_some_and(|n| n != "stage.json") {
                out.push(path.strip_prefix(root).unwrap_or(&path).to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Every stack directory directly below `dir`, in name order.
pub fn load_stacks(dir: &Path) -> Result<Vec<SliceStack>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_stack(d)).collect()
}

fn stack_dir(dir: &Path, stack: &SliceStack) -> PathBuf {
    dir.join(format!("{}_{}", stack.patient_id, stack.scan_id))
}

pub fn patient_id(i: usize) -> String {
    format!("P{i:02}")
}

pub fn generate_phantoms(data: &DataConfig) -> Result<Vec<SliceStack>> {
    (0..data.num_patients)
        .map(|i| generate_phantom_stack(&data.phantom, &patient_id(i), "S0"))
        .collect()
}

pub fn make_split_spec(stacks: &[SliceStack], split: &SplitConfig) -> Result<SplitSpec> {
    if let Some(spec) = &split.spec {
        return Ok(spec.clone());
    }
    let patients: Vec<String> = stacks
        .iter()
        .map(|s| s.patient_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if split.subset_b + 3 > patients.len() {
        return Err(Error::Config(format!(
            "{} patients cannot fill subset B ({}) and three subset A partitions",
            patients.len(),
            split.subset_b
        )));
    }
    let (a, b) = patients.split_at(patients.len() - split.subset_b);
    Ok(SplitSpec {
        subset_a: a.to_vec(),
        subset_b: b.to_vec(),
        within_a: WithinA::Fractions {
            train: split.train,
            val: split.val,
            test: split.test,
        },
    })
}

/// Rebuild a split from stored patient ids.
pub fn apply_assignment(stacks: &[SliceStack], assignment: &SplitAssignment) -> Result<DatasetSplit> {
    assignment.check_leakage()?;
    let mut split = DatasetSplit::default();
    for s in stacks {
        let p = &s.patient_id;
        let part = if assignment.train.contains(p) {
            &mut split.train
        } else if assignment.val.contains(p) {
            &mut split.val
        } else if assignment.test.contains(p) {
            &mut split.test
        } else if assignment.subset_b.contains(p) {
            &mut split.subset_b
        } else {
            return Err(Error::Validation(format!("patient {p} missing from the stored split")));
        };
        part.push(s.clone());
    }
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(Error::Validation(
            "train, val and test partitions must be non-empty".into(),
        ));
    }
    Ok(split)
}

fn kept_pairs(sparse: &[SparseDataset]) -> Vec<ImageMaskPair> {
    sparse.iter().flat_map(|s| s.kept.iter().cloned()).collect()
}

fn triplets(sparse: &[SparseDataset]) -> Result<Vec<TrainingTriplet>> {
    let mut out = Vec::new();
    for s in sparse {
        out.extend(make_training_triplets(s)?);
    }
    Ok(out)
}

fn stack_pairs(stacks: &[SliceStack]) -> Vec<ImageMaskPair> {
    stacks.iter().flat_map(|s| s.pairs.iter().cloned()).collect()
}

fn persist_filled(
    dir: &Path,
    sparse: &[SparseDataset],
    mut fill: impl FnMut(&SparseDataset) -> Result<BTreeMap<GapSlot, ImageMaskPair>>,
    train: &[SliceStack],
) -> Result<()> {
    for (sp, src) in sparse.iter().zip(train) {
        let assembled = assemble_interpolated_dataset(sp, &fill(sp)?)?;
        let stack = SliceStack {
            pairs: assembled.stack.pairs,
            ..src.clone()
        };
        persist_stack(&stack, &stack_dir(dir, src))?;
    }
    Ok(())
}

fn patients(stacks: &[SliceStack]) -> BTreeSet<String> {
    stacks.iter().map(|s| s.patient_id.clone()).collect()
}

/// Execute the enabled stages in dependency order, reusing any stage whose
/// key hash matches what is on disk.
pub fn run_pipeline(config: &ExperimentConfig, options: &RunOptions) -> Result<RunManifest> {
    let cfg = config.resolved();
    cfg.validate()?;
    let mut r = Runner::open(&cfg.output_dir, config_hash(&cfg), options)?;
    let result = run_stages(&cfg, options, &mut r);
    match result {
        Ok(()) => {
            r.manifest.complete = options.until.is_none() || options.until == Some(StageKind::Report);
            r.save()?;
            Ok(r.manifest)
        }
        Err(e) => {
            if r.manifest.failed_stage.is_none() {
                r.save()?;
            }
            Err(e)
        }
    }
}

fn run_stages(cfg: &ExperimentConfig, options: &RunOptions, r: &mut Runner) -> Result<()> {
    let done = |k: StageKind| options.until.is_some_and(|u| u < k);

    let (data_dir, data_hash) = r.stage(StageKind::Phantom, "phantom", &cfg.data, |dir| {
        if cfg.data.dataset_path.is_some() {
            return Ok(());
        }
        for s in generate_phantoms(&cfg.data)? {
            persist_stack(&s, &stack_dir(dir, &s))?;
        }
        Ok(())
    })?;
    let stacks = load_stacks(cfg.data.dataset_path.as_deref().unwrap_or(&data_dir))?;
    if stacks.is_empty() {
        return Err(Error::Stage {
            stage: "phantom".into(),
            source: Box::new(Error::Validation("no stacks found".into())),
        });
    }
    if done(StageKind::Split) {
        return Ok(());
    }

    let (split_dir, split_hash) = r.stage(StageKind::Split, "split", &(&data_hash, &cfg.split), |dir| {
        let spec = make_split_spec(&stacks, &cfg.split)?;
        let split = split_dataset(&stacks, &spec, cfg.split.seed)?;
        write_json(&dir.join("split_spec.json"), &spec)?;
        write_json(&dir.join("assignment.json"), &split.assignment())
    })?;
    let split = apply_assignment(&stacks, &read_json(&split_dir.join("assignment.json"))?)?;
    let train_patients = patients(&split.train);
    let embedder = FeatureEmbedder::<f32>::new(cfg.eval.embedder.clone())?;
    let mut records: Vec<ModelRecord> = Vec::new();
    let mut generators: Vec<(usize, PathBuf)> = Vec::new();
    let mut upstream = vec![split_hash.clone()];

    for &number in &cfg.settings {
        if done(StageKind::Sparsify) {
            break;
        }
        let setting = AnnotationSetting::from_number(number)?;
        let sparse_train = split
            .train
            .iter()
            .map(|s| sparsify(s, setting))
            .collect::<Result<Vec<_>>>()?;
        let sparse_val = split
            .val
            .iter()
            .map(|s| sparsify(s, setting))
            .collect::<Result<Vec<_>>>()?;
        let (_, sparse_hash) = r.stage(
            StageKind::Sparsify,
            &format!("sparsify-s{number}"),
            &(&split_hash, number),
            |dir| {
                for (sp, src) in sparse_train
                    .iter()
                    .chain(&sparse_val)
                    .zip(split.train.iter().chain(&split.val))
                {
                    write_json(&stack_dir(dir, src).with_extension("json"), &sp.plan()?)?;
                }
                Ok(())
            },
        )?;
        let partial = kept_pairs(&sparse_train);
        let val = kept_pairs(&sparse_val);
        let mut datasets: Vec<(&'static str, Vec<ImageMaskPair>, String, Option<AugmentConfig>)> =
            vec![("partial", partial.clone(), sparse_hash.clone(), None)];
        if cfg.stages.classical_aug {
            datasets.push((
                "partial_aug",
                partial.clone(),
                sparse_hash.clone(),
                Some(cfg.augment.clone()),
            ));
        }

        if cfg.stages.interslice_aug && !done(StageKind::TrainGen) {
            let train_t = triplets(&sparse_train)?;
            // FID reads only images, which every validation slice has
            let val_t: Vec<TrainingTriplet> = split
                .val
                .iter()
                .flat_map(|s| dense_triplets(s, setting.period(), 1))
                .collect();
            let (gen_dir, gen_hash) = r.stage(
                StageKind::TrainGen,
                &format!("train-gen-s{number}"),
                &(&sparse_hash, &cfg.gan, &cfg.eval.embedder),
                |dir| train_generator::<f32, f32>(&train_t, &val_t, &cfg.gan, &embedder, Some(dir)).map(|_| ()),
            )?;
            generators.push((number, gen_dir.clone()));
            upstream.push(gen_hash.clone());
            if !done(StageKind::Fill) {
                let gan = load_generator::<f32>(&gen_dir)?.model;
                let (fill_dir, fill_hash) = r.stage(StageKind::Fill, &format!("fill-s{number}"), &gen_hash, |dir| {
                    persist_filled(
                        dir,
                        &sparse_train,
                        |sp| fill_gaps(sp, &gan, &sp.interpolation_requests()),
                        &split.train,
                    )
                })?;
                let mut filled_dir = fill_dir;
                let mut filled_hash = fill_hash;
                if cfg.stages.deblur && !done(StageKind::TrainDeblur) {
                    let (deblur_dir, deblur_hash) = r.stage(
                        StageKind::TrainDeblur,
                        &format!("train-deblur-s{number}"),
                        &(&gen_hash, &cfg.deblur),
                        |dir| {
                            let pairs = build_deblur_pairs(&gan, &train_t)?;
                            let val_pairs = build_deblur_pairs(&gan, &val_t)?;
                            train_deblur::<f32>(&pairs, &val_pairs, &cfg.deblur, Some(dir)).map(|_| ())
                        },
                    )?;
                    let src_dir = filled_dir.clone();
                    let (dir, hash) = r.stage(
                        StageKind::TrainDeblur,
                        &format!("deblur-fill-s{number}"),
                        &(&filled_hash, &deblur_hash),
                        |dir| {
                            let model = load_deblur::<f32>(&deblur_dir)?.model;
                            for mut stack in load_stacks(&src_dir)? {
                                for p in stack.pairs.iter_mut().filter(|p| !p.annotated) {
                                    *p = deblur_imp(&model, p)?;
                                }
                                persist_stack(&stack, &stack_dir(dir, &stack))?;
                            }
                            Ok(())
                        },
                    )?;
                    filled_dir = dir;
                    filled_hash = hash;
                }
                datasets.push(("interslice", stack_pairs(&load_stacks(&filled_dir)?), filled_hash, None));
            }
        }
        if cfg.stages.bilinear_baseline && !done(StageKind::Fill) {
            let (dir, hash) = r.stage(
                StageKind::Fill,
                &format!("fill-bilinear-s{number}"),
                &sparse_hash,
                |dir| {
                    persist_filled(
                        dir,
                        &sparse_train,
                        |sp| fill_gaps_bilinear(sp, &sp.interpolation_requests()),
                        &split.train,
                    )
                },
            )?;
            datasets.push(("bilinear", stack_pairs(&load_stacks(&dir)?), hash, None));
        }
        if cfg.stages.gan_reco_baseline && !done(StageKind::TrainDeblur) {
            let (dir, hash) = r.stage(
                StageKind::TrainDeblur,
                &format!("gan-reco-s{number}"),
                &(&sparse_hash, &cfg.deblur),
                |dir| {
                    let (combined, _) =
                        gan_reconstruction_baseline::<f32>(&partial, &cfg.deblur, Some(&dir.join("model")))?;
                    let pairs = combined
                        .into_iter()
                        .enumerate()
                        .map(|(i, p)| ImageMaskPair { slice_index: i, ..p })
                        .collect();
                    let stack = SliceStack {
                        pairs,
                        patient_id: "combined".into(),
                        ..split.train[0].clone()
                    };
                    persist_stack(&stack, &dir.join("dataset"))
                },
            )?;
            datasets.push(("gan_reco", load_stack(&dir.join("dataset"))?.pairs, hash, None));
        }

        if done(StageKind::TrainSeg) {
            continue;
        }
        for (model, data, data_hash, augment) in datasets {
            let seg = SegConfig {
                augment,
                ..cfg.seg.clone()
            };
            let name = format!("train-seg-{model}-s{number}");
            let (dir, hash) = r.stage(StageKind::TrainSeg, &name, &(&data_hash, &seg), |dir| {
                train_segmenter::<f32>(&data, &val, &seg, Some(dir)).map(|_| ())
            })?;
            upstream.push(hash);
            records.push(ModelRecord {
                model: model.to_string(),
                setting: Some(number),
                checkpoint: dir,
                train_patients: train_patients.clone(),
            });
        }
    }

    if cfg.stages.fully_supervised && !done(StageKind::TrainSeg) {
        let data = stack_pairs(&split.train);
        let val = stack_pairs(&split.val);
        let (dir, hash) = r.stage(StageKind::TrainSeg, "train-seg-full", &(&split_hash, &cfg.seg), |dir| {
            train_segmenter::<f32>(&data, &val, &cfg.seg, Some(dir)).map(|_| ())
        })?;
        upstream.push(hash);
        records.push(ModelRecord {
            model: "full".into(),
            setting: None,
            checkpoint: dir,
            train_patients: train_patients.clone(),
        });
    }
    if done(StageKind::Eval) {
        return Ok(());
    }

    let (eval_dir, eval_hash) = r.stage(
        StageKind::Eval,
        "eval",
        &(
            &upstream,
            &generators.iter().map(|g| g.0).collect::<Vec<_>>(),
            &cfg.eval,
        ),
        |dir| {
            let report = evaluate_and_report(&records, &split, &generators, &cfg.eval, &train_patients)?;
            write_json(&dir.join("report.json"), &report)
        },
    )?;
    if done(StageKind::Report) {
        return Ok(());
    }
    let (report_dir, _) = r.stage(StageKind::Report, "report", &eval_hash, |dir| {
        let report: EvaluationReport = read_json(&eval_dir.join("report.json"))?;
        report.write(dir)
    })?;
    for name in report::REPORT_FILES {
        let src = report_dir.join(name);
        fs::copy(&src, cfg.output_dir.join(name)).map_err(|e| Error::io(&src, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        assert!(ExperimentConfig::from_toml("bogus_key = 1").is_err());
        let partial = ExperimentConfig::from_toml("settings = [1, 3]\n[stages]\ndeblur = true\n").unwrap();
        assert_eq!(partial.settings, vec![1, 3]);
        assert!(partial.stages.interslice_aug && partial.stages.deblur);
        let gan = ExperimentConfig::from_toml("[gan]\nbatch_size = 1\n").unwrap().gan;
        assert_eq!(gan.batch_size, 1);
        assert_eq!(gan.encoder_widths, c.gan.encoder_widths);
        assert_eq!(gan.fid_stop_threshold, f64::INFINITY);
        assert!(ExperimentConfig::from_toml("[gan]\nbogus = 1\n").is_err());
    }

    #[test]
    fn dependency_rules() {
        let deblur_only = ExperimentConfig {
            stages: StageToggles {
                interslice_aug: false,
                deblur: true,
                ..StageToggles::default()
            },
            ..ExperimentConfig::default()
        };
        assert!(deblur_only.validate().is_err());
        let nothing = ExperimentConfig {
            settings: vec![],
            stages: StageToggles {
                interslice_aug: false,
                ..StageToggles::default()
            },
            ..ExperimentConfig::default()
        };
        assert!(nothing.validate().is_err());
        assert!(ExperimentConfig {
            settings: vec![5],
            ..ExperimentConfig::default()
        }
        .validate()
        .is_err());
        assert!(ExperimentConfig {
            settings: vec![3, 3],
            ..ExperimentConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn seed_reaches_every_trainer() {
        let c = ExperimentConfig {
            seed: 42,
            ..ExperimentConfig::default()
        }
        .resolved();
        assert_eq!((c.gan.seed, c.deblur.seed, c.seg.seed), (42, 42, 42));
    }

    #[test]
    fn stage_names_parse() {
        for k in StageKind::ALL {
            assert_eq!(StageKind::parse(k.name()).unwrap(), k);
        }
        assert!(StageKind::parse("deploy").is_err());
    }

    #[test]
    fn split_spec_puts_last_patients_in_subset_b() {
        let data = DataConfig {
            num_patients: 6,
            phantom: PhantomConfig {
                num_slices: 3,
                ..PhantomConfig::default()
            },
            ..DataConfig::default()
        };
        let stacks = generate_phantoms(&data).unwrap();
        let spec = make_split_spec(
            &stacks,
            &SplitConfig {
                subset_b: 2,
                ..SplitConfig::default()
            },
        )
        .unwrap();
        assert_eq!(spec.subset_b, vec!["P04".to_string(), "P05".to_string()]);
        let split = split_dataset(&stacks, &spec, 0).unwrap();
        let again = apply_assignment(&stacks, &split.assignment()).unwrap();
        assert_eq!(again.assignment(), split.assignment());
        assert!(make_split_spec(
            &stacks,
            &SplitConfig {
                subset_b: 4,
                ..SplitConfig::default()
            }
        )
        .is_err());
    }
}
