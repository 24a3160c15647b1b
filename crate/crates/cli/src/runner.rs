//! Stage execution and artifact layout.
//!
//! ```text
//! <out>/<name>/MANIFEST.toml
//! <out>/<name>/config.toml
//! <out>/<name>/de/n<N>.csv, n<N>_summary.csv, n<N>_mu.csv
//! <out>/<name>/cells/n<N>_s<SEED>/sample.csv, amp_<VARIANT>.csv, iterates_<VARIANT>.csv
//! <out>/<name>/verify/n<N>_gaps.csv, n<N>_s<SEED>_variants.csv, n<N>_spike.csv
//! <out>/<name>/tree_oracle.csv
//! <out>/<name>/lv.csv
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use amplab::lotka_volterra::{results_to_csv, Scaled};
use amplab::sampler::LinearOperator;
use amplab::tree_oracle::{all_cells, count_nb_trees, verify_tree_identity};
use amplab::verification::{gap_reports_to_csv, onsager_variant_gap, GapConfig, GapReport};
use amplab::{
    add_rank_one, amp_run, amp_run_noncentered, convergence_gap, de_run, de_run_noncentered,
    estimate_spectral_norm, lv_equilibrium, sample_t_correlated, CorrelationProfile, DEState,
    EquilibriumResult, MuSchedule, OnsagerVariant, SampledMatrix, Trajectory, VarianceProfile,
};
use clap::ValueEnum;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigError, ExperimentConfig, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Stage {
    Sample,
    De,
    Amp,
    Verify,
    TreeOracle,
    Lv,
    Full,
}

impl Stage {
    pub const CONCRETE: [Stage; 6] = [Stage::Sample, Stage::De, Stage::Amp, Stage::Verify, Stage::TreeOracle, Stage::Lv];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Sample => "sample",
            Stage::De => "de",
            Stage::Amp => "amp",
            Stage::Verify => "verify",
            Stage::TreeOracle => "tree-oracle",
            Stage::Lv => "lv",
            Stage::Full => "full",
        }
    }

    /// Concrete stages whose artifacts a request writes.
    fn selection(self, config: &ExperimentConfig) -> Vec<Stage> {
        match self {
            Stage::Full => Self::CONCRETE
                .into_iter()
                .filter(|s| match s {
                    Stage::TreeOracle => config.tree_oracle.is_some(),
                    Stage::Lv => config.lv.is_some(),
                    _ => true,
                })
                .collect(),
            Stage::Verify => vec![Stage::De, Stage::Amp, Stage::Verify],
            s => vec![s],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: Stage, message: String },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Stage { .. } => 1,
        }
    }
}

#[derive(Debug, Serialize)]
struct Manifest {
    schema_version: u32,
    tool: &'static str,
    version: &'static str,
    core_version: &'static str,
    name: String,
    config_hash: String,
    requested_stage: String,
    seeds: Vec<u64>,
    started_unix: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    finished_unix: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    failed_stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    stages: BTreeMap<String, String>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Appends a `config_hash` column unless the header already has one.
pub fn stamp(csv_text: &str, hash: &str) -> String {
    let mut lines = csv_text.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    if header.split(',').any(|h| h == "config_hash") {
        return csv_text.to_string();
    }
    let mut out = format!("{header},config_hash\n");
    for line in lines {
        out.push_str(line);
        out.push(',');
        out.push_str(hash);
        out.push('\n');
    }
    out
}

struct Run<'a> {
    config: &'a ExperimentConfig,
    base: &'a Path,
    dir: PathBuf,
    hash: String,
    selected: Vec<Stage>,
    manifest: Manifest,
}

type StageResult<T> = Result<T, (Stage, String)>;

fn fail<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> (Stage, String) {
    move |e| (stage, e.to_string())
}

impl Run<'_> {
    fn wants(&self, s: Stage) -> bool {
        self.selected.contains(&s)
    }

    fn write(&self, stage: Stage, rel: &str, csv_text: &str) -> StageResult<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(fail(stage))?;
        }
        std::fs::write(&path, stamp(csv_text, &self.hash)).map_err(fail(stage))
    }

    fn set_status(&mut self, stage: Stage, status: &str) {
        self.manifest.stages.insert(stage.name().to_string(), status.to_string());
    }

    fn write_manifest(&self) -> std::io::Result<()> {
        let text = toml::to_string(&self.manifest).expect("manifest serializes");
        std::fs::write(self.dir.join("MANIFEST.toml"), text)
    }

    fn vector(&self, spec: &crate::config::VectorSpec, n: usize, field: &str, stage: Stage) -> StageResult<Vec<f64>> {
        spec.resolve(n, self.base, field).map_err(fail(stage))
    }

    fn pipeline(&mut self) -> StageResult<()> {
        let needs_matrix = self.wants(Stage::Sample) || self.wants(Stage::Amp);
        let needs_de = self.wants(Stage::De)
            || self.wants(Stage::Verify)
            || (self.wants(Stage::Amp) && self.config.variants.contains(&OnsagerVariant::Ampz));
        if !needs_matrix && !needs_de {
            return Ok(());
        }
        let c = self.config;
        let h = c.activation();
        for &n in &c.n {
            let first = if needs_de { Stage::De } else { *self.selected.first().expect("stage") };
            let s = c.variance_profile(n, self.base).map_err(fail(first))?;
            let t = c.correlation_profile(n).map_err(fail(first))?;
            let x0 = self.vector(&c.x0, n, "x0", first)?;
            let eta = self.vector(&c.eta, n, "eta", first)?;
            let beta = self.vector(&c.beta, n, "beta", first)?;
            let spike = match &c.spike {
                Some(sp) => {
                    let u = self.vector(&sp.u, n, "spike.u", first)?;
                    let v = match &sp.v {
                        Some(v) => self.vector(v, n, "spike.v", first)?,
                        None => vec![1.0 / n as f64; n],
                    };
                    Some((sp.lambda, u, v))
                }
                None => None,
            };
            let de = if needs_de {
                let (de, mu) = match &spike {
                    Some((lambda, u, v)) => {
                        let (de, mu) = de_run_noncentered(&s, &h, &x0, &eta, *lambda, u, v, c.t_max, &c.engine)
                            .map_err(fail(Stage::De))?;
                        (de, Some(mu))
                    }
                    None => (de_run(&s, &h, &x0, &eta, c.t_max, &c.engine).map_err(fail(Stage::De))?, None),
                };
                if self.wants(Stage::De) {
                    self.write(Stage::De, &format!("de/n{n}.csv"), &de.to_csv().map_err(fail(Stage::De))?)?;
                    self.write(Stage::De, &format!("de/n{n}_summary.csv"), &de.summary_csv().map_err(fail(Stage::De))?)?;
                    if let Some(mu) = &mu {
                        self.write(Stage::De, &format!("de/n{n}_mu.csv"), &mu.to_csv().map_err(fail(Stage::De))?)?;
                    }
                }
                Some((de, mu))
            } else {
                None
            };
            if !needs_matrix {
                continue;
            }
            let inputs = CellInputs { s: &s, t: &t, x0: &x0, eta: &eta, beta: &beta, spike: spike.as_ref(), de: de.as_ref().map(|d| &d.0) };
            let seeds = self.manifest.seeds.clone();
            let this = &*self;
            let cells: Vec<StageResult<Vec<Trajectory>>> =
                seeds.par_iter().map(|&seed| this.cell(n, seed, &inputs)).collect();
            let mut trajs = Vec::with_capacity(cells.len());
            for cell in cells {
                trajs.push(cell?);
            }
            if self.wants(Stage::Verify) {
                let (de, mu) = de.as_ref().expect("verify computes density evolution");
                self.verify(n, &trajs, de, mu.as_ref(), spike.as_ref().map(|s| s.1.as_slice()))?;
            }
        }
        Ok(())
    }

    fn cell(&self, n: usize, seed: u64, inp: &CellInputs<'_>) -> StageResult<Vec<Trajectory>> {
        let c = self.config;
        let stage = if self.wants(Stage::Sample) { Stage::Sample } else { Stage::Amp };
        let w = sample_t_correlated(inp.s, inp.t, c.distribution, seed).map_err(fail(stage))?;
        let dir = format!("cells/n{n}_s{seed}");
        if self.wants(Stage::Sample) {
            self.write(Stage::Sample, &format!("{dir}/sample.csv"), &sample_csv(&w).map_err(fail(Stage::Sample))?)?;
        }
        if !self.wants(Stage::Amp) {
            return Ok(Vec::new());
        }
        let h = c.activation();
        let mut out = Vec::new();
        for &variant in &c.variants {
            let tr = match inp.spike {
                Some((lambda, u, v)) => {
                    let a = add_rank_one(w.clone(), *lambda, u.clone(), v.clone()).map_err(fail(Stage::Amp))?;
                    let de = inp.de.expect("spiked runs compute density evolution");
                    amp_run_noncentered(&a, inp.t, &h, inp.x0, inp.eta, c.t_max, de)
                }
                None => amp_run(&w, inp.t, &h, inp.x0, inp.eta, variant, c.t_max, inp.de),
            }
            .map_err(fail(Stage::Amp))?
            .with_beta(inp.beta.to_vec())
            .map_err(fail(Stage::Amp))?
            .with_config_hash(&self.hash);
            let tag = variant.tag();
            self.write(Stage::Amp, &format!("{dir}/amp_{tag}.csv"), &tr.summary_csv().map_err(fail(Stage::Amp))?)?;
            if c.write_iterates {
                self.write(Stage::Amp, &format!("{dir}/iterates_{tag}.csv"), &tr.to_csv().map_err(fail(Stage::Amp))?)?;
            }
            out.push(tr);
        }
        Ok(out)
    }

    fn verify(
        &self,
        n: usize,
        trajs: &[Vec<Trajectory>],
        de: &DEState,
        mu: Option<&MuSchedule>,
        u: Option<&[f64]>,
    ) -> StageResult<()> {
        let c = self.config;
        let cfg = GapConfig { mc_samples: c.verify.mc_samples, seed: c.verify.seed };
        let mut reports: Vec<(String, GapReport)> = Vec::new();
        for (k, variant) in c.variants.iter().enumerate() {
            let per_variant: Vec<Trajectory> = trajs.iter().map(|v| v[k].clone()).collect();
            for phi in c.test_functions() {
                let r = convergence_gap(&per_variant, de, &phi, &cfg).map_err(fail(Stage::Verify))?;
                reports.push((format!("{}-n{n}-{}", c.name, variant.tag()), r));
            }
        }
        let csv = gap_reports_to_csv(reports.iter().map(|(id, r)| (id.as_str(), r))).map_err(fail(Stage::Verify))?;
        self.write(Stage::Verify, &format!("verify/n{n}_gaps.csv"), &csv)?;
        let pos = |v: OnsagerVariant| c.variants.iter().position(|&x| x == v);
        if let (Some(z), Some(w), Some(a)) = (pos(OnsagerVariant::Ampz), pos(OnsagerVariant::Ampw), pos(OnsagerVariant::Amp)) {
            for cell in trajs {
                let g = onsager_variant_gap(&cell[z], &cell[w], &cell[a]).map_err(fail(Stage::Verify))?;
                let seed = cell[z].seed();
                self.write(Stage::Verify, &format!("verify/n{n}_s{seed}_variants.csv"), &g.to_csv().map_err(fail(Stage::Verify))?)?;
            }
        }
        if let (Some(mu), Some(u)) = (mu, u) {
            let uu: f64 = u.iter().map(|x| x * x).sum();
            let mut text = String::from("n,seed,t,mu,projection\n");
            for cell in trajs {
                let tr = &cell[0];
                for step in 1..=tr.depth() {
                    let proj = if uu > 0.0 {
                        u.iter().zip(tr.x(step)).map(|(a, b)| a * b).sum::<f64>() / uu
                    } else {
                        0.0
                    };
                    text.push_str(&format!("{n},{},{step},{},{proj}\n", tr.seed(), mu.mu(step)));
                }
            }
            self.write(Stage::Verify, &format!("verify/n{n}_spike.csv"), &text)?;
        }
        Ok(())
    }

    fn tree_oracle(&self) -> StageResult<()> {
        let c = self.config;
        let spec = c.tree_oracle.as_ref().ok_or((Stage::TreeOracle, "missing [tree_oracle] section".to_string()))?;
        let f = c.tree_polynomial().expect("tree section present");
        let s = amplab::make_dense_profile(spec.n, true).map_err(fail(Stage::TreeOracle))?;
        let t = CorrelationProfile::constant(spec.rho).map_err(fail(Stage::TreeOracle))?;
        let x0: Vec<Vec<f64>> = self
            .vector(&c.x0, spec.n, "x0", Stage::TreeOracle)?
            .into_iter()
            .map(|v| vec![v; spec.marks])
            .collect();
        let cells = all_cells(spec.n, spec.marks);
        let per_cell = count_nb_trees(spec.n, spec.marks, spec.degree, spec.depth, false);
        let rows: Vec<StageResult<String>> = self
            .manifest
            .seeds
            .par_iter()
            .map(|&seed| {
                let w = sample_t_correlated(&s, &t, c.distribution, seed).map_err(fail(Stage::TreeOracle))?;
                let gap = verify_tree_identity(&w, &f, &x0, spec.depth, &cells).map_err(fail(Stage::TreeOracle))?;
                Ok(format!(
                    "{seed},{},{},{},{},{per_cell},{gap:e}\n",
                    spec.n, spec.marks, spec.degree, spec.depth
                ))
            })
            .collect();
        let mut text = String::from("seed,n,marks,degree,depth,trees_per_vertex_cell,max_gap\n");
        for r in rows {
            text.push_str(&r?);
        }
        self.write(Stage::TreeOracle, "tree_oracle.csv", &text)
    }

    fn lv(&self) -> StageResult<()> {
        let c = self.config;
        let spec = c.lv.as_ref().ok_or((Stage::Lv, "missing [lv] section".to_string()))?;
        let mut results: Vec<EquilibriumResult> = Vec::new();
        for &n in &c.n {
            let s = c.variance_profile(n, self.base).map_err(fail(Stage::Lv))?;
            let t = c.correlation_profile(n).map_err(fail(Stage::Lv))?;
            let cells: Vec<StageResult<EquilibriumResult>> = self
                .manifest
                .seeds
                .par_iter()
                .map(|&seed| {
                    let w = sample_t_correlated(&s, &t, c.distribution, seed).map_err(fail(Stage::Lv))?;
                    let a = Scaled::new(&w as &dyn LinearOperator, spec.scale);
                    Ok(lv_equilibrium(&a, spec.tol, spec.max_iter, spec.relaxation)
                        .map_err(fail(Stage::Lv))?
                        .with_seed(seed))
                })
                .collect();
            for r in cells {
                results.push(r?);
            }
        }
        self.write(Stage::Lv, "lv.csv", &results_to_csv(&results).map_err(fail(Stage::Lv))?)
    }
}

struct CellInputs<'a> {
    s: &'a VarianceProfile,
    t: &'a CorrelationProfile,
    x0: &'a [f64],
    eta: &'a [f64],
    beta: &'a [f64],
    spike: Option<&'a (f64, Vec<f64>, Vec<f64>)>,
    de: Option<&'a DEState>,
}

/// `n, seed, distribution, nnz, spectral_norm, pair_correlation`.
fn sample_csv(w: &SampledMatrix) -> amplab::Result<String> {
    let n = w.n();
    let (mut cross, mut lower, mut upper) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for (j, v) in w.w().row(i) {
            if j > i {
                let m = w.get(j, i);
                cross += v * m;
                upper += v * v;
                lower += m * m;
            }
        }
    }
    let corr = if upper > 0.0 && lower > 0.0 { cross / (upper * lower).sqrt() } else { 0.0 };
    let norm = estimate_spectral_norm(w, 100, 1e-6).estimate;
    let dist = w.distribution().map_or("explicit", |d| d.name());
    Ok(format!(
        "n,seed,distribution,nnz,spectral_norm,pair_correlation\n{n},{},{dist},{},{norm},{corr}\n",
        w.seed(),
        w.profile().nnz()
    ))
}

/// Runs `stage` for `config`; artifacts go to `<out_root>/<name>/`. Partial
/// artifacts and a MANIFEST naming the failed stage survive failures.
pub fn run_experiment(
    config: &ExperimentConfig,
    base: &Path,
    out_root: &Path,
    stage: Stage,
    workers: usize,
) -> Result<PathBuf, RunError> {
    config.validate()?;
    if config.seeds.is_empty() {
        return Err(ConfigError { field: "seeds".into(), line: None, message: "no seeds given".into() }.into());
    }
    if stage == Stage::TreeOracle && config.tree_oracle.is_none() {
        return Err(ConfigError { field: "tree_oracle".into(), line: None, message: "section required by stage `tree-oracle`".into() }.into());
    }
    if stage == Stage::Lv && config.lv.is_none() {
        return Err(ConfigError { field: "lv".into(), line: None, message: "section required by stage `lv`".into() }.into());
    }
    let dir = out_root.join(&config.name);
    let io = |e: std::io::Error| RunError::Stage { stage, message: format!("{}: {e}", dir.display()) };
    std::fs::create_dir_all(&dir).map_err(io)?;
    std::fs::write(dir.join("config.toml"), config.to_toml()).map_err(io)?;
    let selected = stage.selection(config);
    let mut stages = BTreeMap::new();
    for s in Stage::CONCRETE {
        stages.insert(s.name().to_string(), if selected.contains(&s) { "pending" } else { "skipped" }.to_string());
    }
    let hash = config.config_hash();
    let mut run = Run {
        config,
        base,
        dir: dir.clone(),
        hash: hash.clone(),
        selected,
        manifest: Manifest {
            schema_version: SCHEMA_VERSION,
            tool: "amplab",
            version: env!("CARGO_PKG_VERSION"),
            core_version: amplab::VERSION,
            name: config.name.clone(),
            config_hash: hash,
            requested_stage: stage.name().to_string(),
            seeds: config.seeds.clone(),
            started_unix: unix_now(),
            finished_unix: None,
            failed_stage: None,
            error: None,
            stages,
        },
    };
    run.write_manifest().map_err(io)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| RunError::Stage { stage, message: e.to_string() })?;
    let outcome = pool.install(|| -> StageResult<()> {
        run.pipeline()?;
        for s in [Stage::Sample, Stage::De, Stage::Amp, Stage::Verify] {
            if run.wants(s) {
                run.set_status(s, "ok");
            }
        }
        run.write_manifest().map_err(fail(Stage::Verify))?;
        if run.wants(Stage::TreeOracle) {
            run.tree_oracle()?;
            run.set_status(Stage::TreeOracle, "ok");
        }
        if run.wants(Stage::Lv) {
            run.lv()?;
            run.set_status(Stage::Lv, "ok");
        }
        Ok(())
    });
    run.manifest.finished_unix = Some(unix_now());
    if let Err((failed, message)) = outcome {
        run.set_status(failed, "failed");
        run.manifest.failed_stage = Some(failed.name().to_string());
        run.manifest.error = Some(message.clone());
        let _ = run.write_manifest();
        return Err(RunError::Stage { stage: failed, message });
    }
    run.write_manifest().map_err(io)?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stamping_appends_a_column() {
        assert_eq!(stamp("a,b\n1,2\n3,4\n", "h"), "a,b,config_hash\n1,2,h\n3,4,h\n");
        let already = "t,config_hash\n1,x\n";
        assert_eq!(stamp(already, "h"), already);
        assert_eq!(stamp("", "h"), "");
    }

    #[test]
    fn verify_implies_its_inputs() {
        let c = crate::config::ExperimentConfig::from_toml(
            "name = \"x\"\nn = [10]\nt_max = 1\n[profile]\nfamily = \"dense\"\n[activation]\nfamily = \"identity\"\n",
        )
        .unwrap();
        assert_eq!(Stage::Verify.selection(&c), vec![Stage::De, Stage::Amp, Stage::Verify]);
        assert_eq!(Stage::Full.selection(&c), vec![Stage::Sample, Stage::De, Stage::Amp, Stage::Verify]);
    }
}
