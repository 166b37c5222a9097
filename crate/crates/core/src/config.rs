//! Pipeline configuration, read from TOML.
//!
//! ```toml
//! method = "fv-bmm"
//! learning = "em"
//! k = 8
//! seed = 7
//! pca_dim = 32
//!
//! [paths]
//! train = "train.dsc"
//! db = "db.dsc"
//! gt = "gt.txt"
//! out_dir = "out"
//! ```
//!
//! Relative paths resolve against the directory of the config file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clustering::LearningMethod;
use crate::error::{Error, Result};
use crate::postproc::DEFAULT_BETA;
use crate::retrieval::{Rescale, DEFAULT_RATIO};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Bow,
    Vlad,
    FvBmm,
    FvGmm,
    Direct,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Bow => "bow",
            Method::Vlad => "vlad",
            Method::FvBmm => "fv-bmm",
            Method::FvGmm => "fv-gmm",
            Method::Direct => "direct",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bow" => Ok(Method::Bow),
            "vlad" => Ok(Method::Vlad),
            "fv-bmm" => Ok(Method::FvBmm),
            "fv-gmm" => Ok(Method::FvGmm),
            "direct" => Ok(Method::Direct),
            other => Err(Error::invalid("method", format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Learning {
    Kmeans,
    Kmajority,
    Kmedoids,
    Em,
}

impl Learning {
    pub fn name(self) -> &'static str {
        match self {
            Learning::Kmeans => "kmeans",
            Learning::Kmajority => "kmajority",
            Learning::Kmedoids => "kmedoids",
            Learning::Em => "em",
        }
    }

    /// The clustering method, or `None` for EM.
    pub fn clustering(self) -> Option<LearningMethod> {
        match self {
            Learning::Kmeans => Some(LearningMethod::KMeans),
            Learning::Kmajority => Some(LearningMethod::KMajority),
            Learning::Kmedoids => Some(LearningMethod::KMedoids),
            Learning::Em => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RescaleMode {
    #[default]
    None,
    Max,
}

impl From<RescaleMode> for Rescale {
    fn from(m: RescaleMode) -> Self {
        match m {
            RescaleMode::None => Rescale::None,
            RescaleMode::Max => Rescale::Max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Descriptors the model is learned from; defaults to `db`.
    pub train: Option<PathBuf>,
    pub db: PathBuf,
    /// Query descriptors; defaults to `db` (leave-one-out style).
    pub queries: Option<PathBuf>,
    pub gt: PathBuf,
    /// CNN signatures (GVEC1) for fusion; both are required with `alpha`.
    pub cnn_db: Option<PathBuf>,
    pub cnn_queries: Option<PathBuf>,
    pub out_dir: PathBuf,
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

fn default_eps() -> f64 {
    crate::mixture::DEFAULT_EPS
}

fn default_ratio() -> f64 {
    DEFAULT_RATIO
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub method: Method,
    /// Not used by `direct`.
    pub learning: Option<Learning>,
    #[serde(default)]
    pub k: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub pca_dim: Option<usize>,
    #[serde(default = "default_true")]
    pub renorm: bool,
    pub alpha: Option<f64>,
    #[serde(default)]
    pub rescale: RescaleMode,
    pub seed: u64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default)]
    pub include_weights: bool,
    #[serde(default)]
    pub include_variances: bool,
    #[serde(default)]
    pub stats_form: bool,
    pub paths: Paths,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        join(&mut p.db);
        join(&mut p.gt);
        join(&mut p.out_dir);
        for q in [&mut p.train, &mut p.queries, &mut p.cnn_db, &mut p.cnn_queries].into_iter().flatten() {
            join(q);
        }
    }

    /// Parameter checks only; see [`PipelineConfig::check_inputs_exist`].
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match (self.method, self.learning) {
            (Method::Direct, None) => {}
            (Method::Direct, Some(l)) => return bad(format!("method `direct` learns no model, drop `learning = \"{}\"`", l.name())),
            (m, None) => return bad(format!("method `{m}` needs `learning`")),
            (Method::Bow | Method::Vlad, Some(Learning::Em)) => return bad(format!("method `{}` needs a clustering method, not `em`", self.method)),
            (Method::FvBmm | Method::FvGmm, Some(l)) if l != Learning::Em => {
                return bad(format!("method `{}` is trained by `em`, not `{}`", self.method, l.name()))
            }
            _ => {}
        }
        if self.method != Method::Direct && self.k == 0 {
            return bad("k must be positive".into());
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad(format!("beta {} must lie in (0, 1]", self.beta));
        }
        if self.pca_dim == Some(0) {
            return bad("pca_dim must be positive".into());
        }
        if self.pca_dim.is_some() && !matches!(self.method, Method::Vlad | Method::FvBmm | Method::FvGmm) {
            return bad(format!("pca_dim does not apply to method `{}`", self.method));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps {} must be positive", self.eps));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return bad(format!("ratio {} must lie in (0, 1]", self.ratio));
        }
        if self.include_variances && self.method != Method::FvGmm {
            return bad("include_variances applies to fv-gmm only".into());
        }
        if let Some(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("alpha {a} must lie in [0, 1]"));
            }
            if !matches!(self.method, Method::Vlad | Method::FvBmm | Method::FvGmm) {
                return bad(format!("fusion needs a vector method, not `{}`", self.method));
            }
            if self.paths.cnn_db.is_none() || self.paths.cnn_queries.is_none() {
                return bad("alpha needs paths.cnn_db and paths.cnn_queries".into());
            }
        }
        Ok(())
    }

    pub fn train_path(&self) -> &Path {
        self.paths.train.as_deref().unwrap_or(&self.paths.db)
    }

    pub fn queries_path(&self) -> &Path {
        self.paths.queries.as_deref().unwrap_or(&self.paths.db)
    }

    /// Every input file this configuration reads, without duplicates.
    pub fn inputs(&self) -> Vec<&Path> {
        let mut out: Vec<&Path> = vec![self.train_path(), &self.paths.db, self.queries_path(), &self.paths.gt];
        if self.alpha.is_some() {
            out.extend(self.paths.cnn_db.as_deref());
            out.extend(self.paths.cnn_queries.as_deref());
        }
        let mut seen = Vec::new();
        out.retain(|p| {
            let fresh = !seen.contains(p);
            seen.push(*p);
            fresh
        });
        out
    }

    pub fn check_inputs_exist(&self) -> Result<()> {
        for p in self.inputs() {
            if !p.is_file() {
                return Err(Error::Config(format!("input `{}` does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
method = "fv-bmm"
learning = "em"
k = 8
seed = 3

[paths]
db = "db.dsc"
gt = "gt.txt"
out_dir = "out"
"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = PipelineConfig::parse(BASE).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.beta, 0.5);
        assert_eq!(cfg.eps, 0.05);
        assert_eq!(cfg.ratio, 0.8);
        assert!(cfg.renorm);
        assert_eq!(cfg.pca_dim, None);
        assert_eq!(cfg.train_path(), Path::new("db.dsc"));
        assert_eq!(cfg.inputs(), [Path::new("db.dsc"), Path::new("gt.txt")]);
    }

    #[test]
    fn method_learning_compatibility() {
        let with = |m: &str, l: Option<&str>| {
            let mut text = BASE.replace("\"fv-bmm\"", &format!("\"{m}\""));
            text = match l {
                Some(l) => text.replace("\"em\"", &format!("\"{l}\"")),
                None => text.replace("learning = \"em\"\n", ""),
            };
            PipelineConfig::parse(&text).unwrap().validate()
        };
        assert!(with("bow", Some("kmajority")).is_ok());
        assert!(with("vlad", Some("kmeans")).is_ok());
        assert!(with("fv-gmm", Some("em")).is_ok());
        assert!(with("direct", None).is_ok());
        assert!(with("bow", Some("em")).is_err());
        assert!(with("fv-bmm", Some("kmedoids")).is_err());
        assert!(with("vlad", None).is_err());
        assert!(with("direct", Some("em")).is_err());
    }

    #[test]
    fn fusion_needs_cnn_paths() {
        let cfg = PipelineConfig::parse(&BASE.replace("seed = 3", "seed = 3\nalpha = 0.5")).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let text = BASE.replace("seed = 3", "seed = 3\nalpha = 1.5").replace("out_dir", "cnn_db = \"a\"\ncnn_queries = \"b\"\nout_dir");
        assert!(PipelineConfig::parse(&text).unwrap().validate().is_err());
    }

    #[test]
    fn unknown_keys_and_values_rejected() {
        assert!(PipelineConfig::parse(&BASE.replace("k = 8", "kay = 8")).is_err());
        assert!(PipelineConfig::parse(&BASE.replace("\"em\"", "\"sgd\"")).is_err());
    }

    #[test]
    fn relative_paths_resolve_and_roundtrip() {
        let mut cfg = PipelineConfig::parse(BASE).unwrap();
        cfg.resolve_paths(Path::new("/data/run"));
        assert_eq!(cfg.paths.db, Path::new("/data/run/db.dsc"));
        assert_eq!(cfg.paths.out_dir, Path::new("/data/run/out"));
        assert_eq!(PipelineConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}
