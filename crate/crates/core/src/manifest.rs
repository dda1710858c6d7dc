//! Plain `key=value` run records.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::binio::write_atomic;
use crate::config::EngineConfig;
use crate::diffusion::CascadeParams;
use crate::error::Result;
use crate::pipeline::PhaseTimings;

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub mu: f64,
    pub beta: f64,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config: EngineConfig,
    pub inputs: Vec<(String, PathBuf)>,
    pub params: Option<PathBuf>,
    pub stages: Vec<StageRecord>,
    pub timings: PhaseTimings,
    pub outputs: Vec<(String, PathBuf)>,
}

impl RunManifest {
    pub fn new(config: &EngineConfig, params: &CascadeParams) -> Self {
        let stages = (0..params.stages())
            .map(|t| StageRecord {
                mu: params.mu(t),
                beta: params.beta(t),
                enabled: config.stage_enabled(t + 1),
            })
            .collect();
        Self {
            config: config.clone(),
            inputs: Vec::new(),
            params: None,
            stages,
            timings: PhaseTimings::default(),
            outputs: Vec::new(),
        }
    }

    /// Stage keys are 1-based, matching `skip_stages`.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let skip: Vec<String> = c.skip_stages.iter().map(usize::to_string).collect();
        let mut out = String::new();
        let mut put = |key: &str, value: &dyn std::fmt::Display| {
            writeln!(out, "{key}={value}").unwrap();
        };
        put("config.num_stages", &c.num_stages);
        put("config.embed_dim", &c.embed_dim);
        put("config.downsample_factor", &c.downsample_factor);
        put("config.affinity_scale", &c.affinity_scale);
        put("config.softmax_temperature", &c.softmax_temperature);
        put("config.standardize_epsilon", &c.standardize_epsilon);
        put("config.skip_stages", &skip.join(","));
        put("config.num_classes", &c.num_classes);
        put("config.pooling", &c.pooling.name());
        for (name, path) in &self.inputs {
            put(&format!("input.{name}"), &path.display());
        }
        match &self.params {
            Some(p) => put("params", &p.display()),
            None => put("params", &"none"),
        }
        for (t, s) in self.stages.iter().enumerate() {
            put(&format!("stage[{}].mu", t + 1), &s.mu);
            put(&format!("stage[{}].beta", t + 1), &s.beta);
            put(&format!("stage[{}].enabled", t + 1), &s.enabled);
        }
        let t = &self.timings;
        put("time.feature", &t.feature);
        put("time.similarity", &t.similarity);
        put("time.seed", &t.seed);
        put("time.diffusion", &t.diffusion);
        for (name, path) in &self.outputs {
            put(&format!("output.{name}"), &path.display());
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}
