use std::path::{Path, PathBuf};

use fastweight_core::descriptors::DescriptorConfig;
use fastweight_core::prototypes::{L0Mode, MergeConfig};
use fastweight_core::retrieval::{ProximalConfig, TrainConfig, TransformKind, DEFAULT_GAMMA_GRID, DEFAULT_LAMBDA_GRID};
use fastweight_core::spectral::{JlConfig, DEFAULT_DIM_ALPHA, DEFAULT_N_BOOT};
use fastweight_core::synthdata::{GeneratorConfig, PartitionConfig};
use fastweight_motifs::permutation::PermutationConfig;
use fastweight_motifs::synthetic::SyntheticSpec;
use fastweight_motifs::tau::TauConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{PipelineError, Result};

pub const FULL_K_GRID: [usize; 3] = [50, 100, 200];
pub const FULL_R_GRID: [usize; 3] = [10, 20, 50];
pub const SEEDS: [u64; 3] = [42, 2023, 777];
pub const SUPPORT_SIZES: [usize; 4] = [5, 10, 20, 50];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grids {
    pub k: Vec<usize>,
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Hard top-r sparsity levels.
    pub r: Vec<usize>,
    pub eta: Vec<f64>,
}

impl Grids {
    pub fn full_scale() -> Self {
        Self {
            k: FULL_K_GRID.to_vec(),
            lambda: DEFAULT_LAMBDA_GRID.to_vec(),
            gamma: DEFAULT_GAMMA_GRID.to_vec(),
            r: FULL_R_GRID.to_vec(),
            eta: vec![0.0, 1e-3, 1e-2],
        }
    }

    /// Grids scaled to a corpus with a few hundred tasks and `d_theta = 8`.
    pub fn desk() -> Self {
        Self {
            k: vec![6, 12, 24],
            r: vec![1, 2, 4],
            ..Self::full_scale()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Config {
    pub ridge_alpha: f64,
    pub rho: f64,
    pub n_boot: usize,
    pub dim_alpha: f64,
    pub n_restarts: usize,
    /// Smallest grid K whose certified coverage error is at most this
    /// fraction of the median seed-adapter norm; the largest K otherwise.
    pub coverage_target: f64,
    pub r_sparse: usize,
    pub l0_mode: L0Mode,
    pub merge: MergeConfig,
    pub jl: JlConfig,
    pub canonicalize: bool,
    /// Skips rank selection and uses this dimension.
    pub fixed_r: Option<usize>,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Self {
            ridge_alpha: fastweight_core::adapters::DEFAULT_RIDGE_ALPHA,
            rho: 0.99,
            n_boot: DEFAULT_N_BOOT,
            dim_alpha: DEFAULT_DIM_ALPHA,
            n_restarts: 10,
            coverage_target: 0.25,
            r_sparse: 2,
            l0_mode: L0Mode::Omp,
            merge: MergeConfig {
                sign_aware: true,
                ..MergeConfig::default()
            },
            jl: JlConfig::default(),
            canonicalize: true,
            fixed_r: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase2Config {
    pub prox: ProximalConfig,
    pub train: TrainConfig,
    pub transform: TransformKind,
    pub hidden: usize,
    pub transform_hidden: usize,
    pub transform_init_scale: f64,
    /// `None` keeps the soft nonnegative-l1 solution untruncated.
    pub top_r: Option<usize>,
    pub descriptor: DescriptorConfig,
    /// Epoch period of the diagnostics log.
    pub diag_period: usize,
    pub support_sizes: Vec<usize>,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Self {
            prox: ProximalConfig::default(),
            train: TrainConfig {
                learning_rate: 1e-2,
                max_epochs: 150,
                ..TrainConfig::default()
            },
            transform: TransformKind::Ode,
            hidden: 32,
            transform_hidden: 16,
            transform_init_scale: 0.1,
            top_r: Some(2),
            descriptor: DescriptorConfig::default(),
            diag_period: 10,
            support_sizes: SUPPORT_SIZES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifStudyConfig {
    pub spec: SyntheticSpec,
    pub n_motifs: usize,
    pub motif_len: usize,
    pub top_frac: f64,
    pub background_sequences: usize,
    pub permutation: PermutationConfig,
    pub q_alpha: f64,
    /// Fraction of sequences carrying a planted motif in the observed repertoire.
    pub planted_effect: f64,
    pub n_planted: usize,
    pub power_effects: Vec<f64>,
    pub power_reps: usize,
    pub power_permutations: usize,
    pub n_cohorts: usize,
    pub cohort_size: usize,
    pub cohort_effect: f64,
    pub tau: TauConfig,
    /// Use `tau = 0.5` instead of the calibrated threshold.
    pub fixed_tau: bool,
    /// Bonferroni on the screened family instead of Storey q-values.
    pub bonferroni_only: bool,
}

impl Default for MotifStudyConfig {
    fn default() -> Self {
        Self {
            spec: SyntheticSpec::default(),
            n_motifs: 500,
            motif_len: fastweight_motifs::channels::DEFAULT_MOTIF_LEN,
            top_frac: fastweight_motifs::channels::DEFAULT_TOP_FRAC,
            background_sequences: 5000,
            permutation: PermutationConfig::default(),
            q_alpha: 0.1,
            planted_effect: 0.5,
            n_planted: 3,
            power_effects: vec![0.0, 0.05, 0.1, 0.2, 0.4],
            power_reps: 200,
            power_permutations: 400,
            n_cohorts: 5,
            cohort_size: 150,
            cohort_effect: 0.8,
            tau: TauConfig::default(),
            fixed_tau: false,
            bonferroni_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub partition: PartitionConfig,
    pub grids: Grids,
    pub seeds: Vec<u64>,
    pub rho_list: Vec<f64>,
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    pub motifs: MotifStudyConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            generator: GeneratorConfig {
                seed: SEEDS[0],
                ..GeneratorConfig::default()
            },
            partition: PartitionConfig {
                seed: SEEDS[0],
                ..PartitionConfig::default()
            },
            grids: Grids::desk(),
            seeds: SEEDS.to_vec(),
            rho_list: vec![0.9, 0.95, 0.99],
            phase1: Phase1Config::default(),
            phase2: Phase2Config::default(),
            motifs: MotifStudyConfig::default(),
            output_dir: PathBuf::from("runs/desk"),
        }
    }

    /// Full-scale grids; the corpus must be large enough for `K` up to 200.
    pub fn full_scale() -> Self {
        Self {
            grids: Grids::full_scale(),
            generator: GeneratorConfig {
                d_theta: 64,
                q: 64,
                r_true: 20,
                n_tasks: 2000,
                seed: SEEDS[0],
                ..GeneratorConfig::default()
            },
            phase2: Phase2Config {
                train: TrainConfig {
                    learning_rate: 1e-3,
                    max_epochs: 1000,
                    ..Phase2Config::default().train
                },
                top_r: Some(20),
                ..Phase2Config::default()
            },
            motifs: MotifStudyConfig {
                permutation: PermutationConfig {
                    b_min: fastweight_motifs::permutation::PRODUCTION_PERMUTATION_FLOOR,
                    b_max: 200_000,
                    ..PermutationConfig::default()
                },
                ..MotifStudyConfig::default()
            },
            ..Self::desk()
        }
    }

    /// Copy with every seed-bearing field derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.generator.seed = seed;
        c.partition.seed = seed;
        c.phase1.jl.seed = seed;
        c.phase2.train.seed = seed;
        c.phase2.descriptor.seed = seed;
        c.motifs.permutation.seed = seed;
        c.motifs.tau.seed = seed;
        c
    }

    pub fn seed(&self) -> u64 {
        self.generator.seed
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.phase2.prox.validate()?;
        self.motifs.permutation.validate()?;
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.grids.k.is_empty() || self.grids.k.contains(&0) {
            return bad("K grid must be nonempty and positive");
        }
        if self.grids.lambda.is_empty() || self.grids.eta.is_empty() || self.grids.gamma.is_empty() || self.grids.r.is_empty() {
            return bad("lambda, eta, gamma and r grids must be nonempty");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.phase1.r_sparse == 0 {
            return bad("r_sparse must be positive");
        }
        if self.phase2.diag_period == 0 {
            return bad("diagnostics period must be positive");
        }
        if self.phase2.support_sizes.iter().any(|&n| n < 2 || n > self.generator.n_support) {
            return bad("support sizes must lie in 2..=n_support");
        }
        if !(self.phase1.rho > 0.0 && self.phase1.rho < 1.0) {
            return bad("rho must lie in (0, 1)");
        }
        Ok(())
    }

    /// SHA-256 of the JSON form with the output directory blanked, so the
    /// hash identifies the experiment rather than where it was written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io(path.display().to_string(), e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    Full,
    FixedR,
    SoftL1Only,
    GammaZero,
    FixedTau,
    BonferroniOnly,
    NoCanonicalization,
    MlpInsteadOfOde,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::Full,
        Ablation::FixedR,
        Ablation::SoftL1Only,
        Ablation::GammaZero,
        Ablation::FixedTau,
        Ablation::BonferroniOnly,
        Ablation::NoCanonicalization,
        Ablation::MlpInsteadOfOde,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "A:full",
            Ablation::FixedR => "B:fixed-r",
            Ablation::SoftL1Only => "C:soft-l1-only",
            Ablation::GammaZero => "D:gamma-0",
            Ablation::FixedTau => "E:fixed-tau-0.5",
            Ablation::BonferroniOnly => "F:bonferroni-only",
            Ablation::NoCanonicalization => "G:no-canonicalization",
            Ablation::MlpInsteadOfOde => "H:mlp-instead-of-ode",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| {
            let l = a.label();
            l == s || &l[..1] == s || &l[2..] == s
        })
    }

    /// Whether the variant changes the retrieval pipeline (as opposed to
    /// only the motif study).
    pub fn touches_retrieval(self) -> bool {
        !matches!(self, Ablation::FixedTau | Ablation::BonferroniOnly)
    }

    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Ablation::Full => {}
            // the largest dimension in the rank-selection window instead of the selected one
            Ablation::FixedR => c.phase1.fixed_r = Some((c.generator.r_true + 2).min(c.generator.d_theta)),
            Ablation::SoftL1Only => c.phase2.top_r = None,
            Ablation::GammaZero => c.phase2.prox.gamma = 0.0,
            Ablation::FixedTau => c.motifs.fixed_tau = true,
            Ablation::BonferroniOnly => c.motifs.bonferroni_only = true,
            Ablation::NoCanonicalization => c.phase1.canonicalize = false,
            Ablation::MlpInsteadOfOde => c.phase2.transform = TransformKind::Residual,
        }
        c
    }
}
