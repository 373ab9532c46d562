//! `key = value` experiment configs.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Lists are comma separated. Unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rec_core::lifelong::SyntheticSpec;
use rec_core::{Arch, Hyperparams, Method, RewardScope, StudentStart, TaskKind};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub struct IdxFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub classes: usize,
    pub downsample: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Stroke images drawn per run from the run seed.
    Synthetic(SyntheticSpec),
    Idx(IdxFiles),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub task_kind: TaskKind,
    pub num_tasks: usize,
    pub methods: Vec<Method>,
    pub hidden: Vec<usize>,
    pub hyper: Hyperparams,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub save_checkpoints: bool,
}

const KEYS: &[&str] = &[
    "dataset",
    "synthetic_side",
    "synthetic_strokes",
    "synthetic_train_per_class",
    "synthetic_test_per_class",
    "synthetic_noise",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "classes",
    "downsample",
    "tasks",
    "num_tasks",
    "methods",
    "hidden",
    "lambda_ewc",
    "lambda_21",
    "lambda_1",
    "epsilon",
    "epochs",
    "batch_size",
    "lr",
    "momentum",
    "fisher_samples",
    "search_episodes",
    "search_batch",
    "child_epochs",
    "controller_lr",
    "reward_scope",
    "reset_controller",
    "distill_epochs",
    "distill_warmup",
    "distill_batch_size",
    "distill_lr",
    "distill_momentum",
    "student_start",
    "seeds",
    "output",
    "save_checkpoints",
];

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.map.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| ConfigError(format!("line {line}: bad value {v:?} for {key}"))),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<(), ConfigError> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>, ConfigError> {
        match self.map.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| ConfigError(format!("line {line}: bad list item {:?} for {key}", p.trim())))
                })
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
        }
    }

    fn path(&mut self, key: &str, base: &Path) -> Result<Option<PathBuf>, ConfigError> {
        Ok(self.take::<String>(key)?.map(|p| base.join(p)))
    }
}

fn parse_scope(s: &str) -> Result<RewardScope, ConfigError> {
    match s {
        "new" => Ok(RewardScope::NewTask),
        "all" => Ok(RewardScope::AllLearned),
        _ => Err(ConfigError(format!("reward_scope must be new or all, got {s:?}"))),
    }
}

fn parse_student(s: &str) -> Result<StudentStart, ConfigError> {
    match s {
        "fresh" => Ok(StudentStart::Fresh),
        "carried" => Ok(StudentStart::Carried),
        _ => Err(ConfigError(format!("student_start must be fresh or carried, got {s:?}"))),
    }
}

impl RunConfig {
    /// Parses config text. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(ConfigError(format!("line {}: unknown key {k:?}", i + 1)));
            }
            if map.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
                return Err(ConfigError(format!("line {}: duplicate key {k:?}", i + 1)));
            }
        }
        let mut e = Entries { map };

        let dataset: String = e.take("dataset")?.unwrap_or_else(|| "synthetic".into());
        let synthetic_keys = [
            "synthetic_side",
            "synthetic_strokes",
            "synthetic_train_per_class",
            "synthetic_test_per_class",
            "synthetic_noise",
        ];
        let idx_keys = ["train_images", "train_labels", "test_images", "test_labels", "classes", "downsample"];
        let data = match dataset.as_str() {
            "synthetic" => {
                if let Some(k) = idx_keys.iter().find(|k| e.map.contains_key(**k)) {
                    return Err(ConfigError(format!("{k} needs dataset = idx")));
                }
                let mut s = SyntheticSpec::default();
                e.set("synthetic_side", &mut s.side)?;
                e.set("synthetic_strokes", &mut s.strokes)?;
                e.set("synthetic_train_per_class", &mut s.train_per_class)?;
                e.set("synthetic_test_per_class", &mut s.test_per_class)?;
                e.set("synthetic_noise", &mut s.noise)?;
                s.validate().map_err(|err| ConfigError(err.to_string()))?;
                DataSource::Synthetic(s)
            }
            "idx" => {
                if let Some(k) = synthetic_keys.iter().find(|k| e.map.contains_key(**k)) {
                    return Err(ConfigError(format!("{k} needs dataset = synthetic")));
                }
                let mut need = |k: &str| e.path(k, base)?.ok_or_else(|| ConfigError(format!("dataset = idx needs {k}")));
                let files = IdxFiles {
                    train_images: need("train_images")?,
                    train_labels: need("train_labels")?,
                    test_images: need("test_images")?,
                    test_labels: need("test_labels")?,
                    classes: e.take("classes")?.unwrap_or(10),
                    downsample: e.take("downsample")?.unwrap_or(false),
                };
                DataSource::Idx(files)
            }
            other => return Err(ConfigError(format!("dataset must be synthetic or idx, got {other:?}"))),
        };

        let task_kind = match e.map.remove("tasks") {
            None => TaskKind::Permuted,
            Some((line, v)) => v.parse().map_err(|_| ConfigError(format!("line {line}: bad task kind {v:?}")))?,
        };
        let num_tasks = e.take("num_tasks")?.unwrap_or(5);
        let methods = e.list("methods")?.unwrap_or_else(|| vec![Method::Sn, Method::Ewc, Method::Mwc, Method::Rec]);
        let hidden = e.list("hidden")?.unwrap_or_else(|| vec![100]);
        let seeds = e.list("seeds")?.unwrap_or_else(|| vec![0, 1, 2]);

        let mut h = Hyperparams::default();
        e.set("lambda_ewc", &mut h.lambda_ewc)?;
        e.set("lambda_21", &mut h.lambda_21)?;
        e.set("lambda_1", &mut h.lambda_1)?;
        e.set("epsilon", &mut h.epsilon)?;
        e.set("epochs", &mut h.schedule.epochs)?;
        e.set("batch_size", &mut h.schedule.batch_size)?;
        e.set("lr", &mut h.schedule.lr)?;
        e.set("momentum", &mut h.schedule.momentum)?;
        e.set("fisher_samples", &mut h.fisher_samples)?;
        e.set("search_episodes", &mut h.search.episodes)?;
        e.set("search_batch", &mut h.search.children_per_batch)?;
        e.set("child_epochs", &mut h.search.child_epochs)?;
        e.set("controller_lr", &mut h.search.controller_lr)?;
        if let Some(s) = e.take::<String>("reward_scope")? {
            h.reward_scope = parse_scope(&s)?;
        }
        e.set("reset_controller", &mut h.reset_controller)?;
        e.set("distill_epochs", &mut h.distill.epochs)?;
        e.set("distill_warmup", &mut h.distill.warmup_fraction)?;
        e.set("distill_batch_size", &mut h.distill.batch_size)?;
        e.set("distill_lr", &mut h.distill.lr)?;
        e.set("distill_momentum", &mut h.distill.momentum)?;
        if let Some(s) = e.take::<String>("student_start")? {
            h.student_start = parse_student(&s)?;
        }
        let output = e.path("output", base)?.unwrap_or_else(|| base.join("results"));
        let save_checkpoints = e.take("save_checkpoints")?.unwrap_or(true);
        debug_assert!(e.map.is_empty(), "every known key is consumed");

        let cfg = RunConfig {
            data,
            task_kind,
            num_tasks,
            methods,
            hidden,
            hyper: h,
            seeds,
            output,
            save_checkpoints,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|err| ConfigError(format!("cannot read config {}: {err}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|ConfigError(m)| ConfigError(format!("{}: {m}", path.display())))
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError(m));
        if self.num_tasks == 0 {
            return bad("num_tasks must be at least 1".into());
        }
        if self.methods.is_empty() || self.seeds.is_empty() {
            return bad("methods and seeds must be nonempty".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("hidden widths must be positive, got {:?}", self.hidden));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        let mut methods = self.methods.iter().map(|m| m.name()).collect::<Vec<_>>();
        methods.sort_unstable();
        methods.dedup();
        if methods.len() != self.methods.len() {
            return bad("methods must be distinct".into());
        }
        for &m in &self.methods {
            rec_core::MethodConfig::new(m, &self.hyper)
                .validate()
                .map_err(|err| ConfigError(format!("{m}: {err}")))?;
        }
        Ok(())
    }

    pub fn method_configs(&self) -> Vec<rec_core::MethodConfig> {
        self.methods.iter().map(|&m| rec_core::MethodConfig::new(m, &self.hyper)).collect()
    }

    pub fn arch(&self, input_dim: usize, output_dim: usize) -> rec_core::Result<Arch> {
        Arch::new(input_dim, self.hidden.clone(), output_dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::parse(text, Path::new("/base"))
    }

    #[test]
    fn defaults_and_overrides() {
        let c = parse("# comment\n\nmethods = ewc, rec\nseeds = 4,5\nlambda_ewc = 10 # inline\nhidden = 20,10\n").unwrap();
        assert_eq!(c.methods, vec![Method::Ewc, Method::Rec]);
        assert_eq!(c.seeds, vec![4, 5]);
        assert_eq!(c.hyper.lambda_ewc, 10.0);
        assert_eq!(c.hidden, vec![20, 10]);
        assert_eq!(c.output, PathBuf::from("/base/results"));
        assert_eq!(c.task_kind, TaskKind::Permuted);
        assert!(matches!(c.data, DataSource::Synthetic(_)));
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(parse("lamda_ewc = 1").unwrap_err().0.contains("unknown key"));
        assert!(parse("seeds = 1\nseeds = 2").unwrap_err().0.contains("duplicate"));
        assert!(parse("seeds").unwrap_err().0.contains("key = value"));
        assert!(parse("seeds = 1,x").is_err());
        assert!(parse("seeds = 1,1").is_err());
        assert!(parse("methods = ewc,bogus").is_err());
        assert!(parse("lambda_ewc = -1").is_err());
        assert!(parse("num_tasks = 0").is_err());
        assert!(parse("train_images = a").unwrap_err().0.contains("dataset = idx"));
        assert!(parse("dataset = idx\ntrain_images = a").unwrap_err().0.contains("train_labels"));
        assert!(parse("reward_scope = some").is_err());
    }

    #[test]
    fn idx_paths_resolve_against_base() {
        let c = parse(
            "dataset = idx\ntrain_images = a\ntrain_labels = b\ntest_images = /abs/c\ntest_labels = d\ndownsample = true\n",
        )
        .unwrap();
        let DataSource::Idx(f) = c.data else { panic!() };
        assert_eq!(f.train_images, PathBuf::from("/base/a"));
        assert_eq!(f.test_images, PathBuf::from("/abs/c"));
        assert!(f.downsample);
    }
}
